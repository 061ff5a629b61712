import socket

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsmra import mra
from nsmra.covariance import KernelSpec
from nsmra.dist import (
    ChecksumError,
    FaultyTransport,
    FrameError,
    LoopbackHub,
    PlanError,
    SocketTransport,
    SyncMessage,
    TransportTimeout,
    audit_plan,
    decode_frame,
    make_plan,
    run_distributed_posterior,
    run_distributed_predict,
)
from nsmra.dist.wire import DOWN, HEADER, UP, decode_header
from nsmra.geo import GeoBox
from nsmra.partition import regular_tree
from nsmra.synth import uniform_locations

BOX = GeoBox(0.0, 16.0, -8.0, 8.0)


def _toy(M=4, r=4, n=240, seed=0):
    rng = np.random.default_rng(seed)
    ll = uniform_locations(BOX, n, rng)
    tree = regular_tree(BOX, M, r, ll[:, 0], ll[:, 1], seed=seed)
    prior = mra.build_prior(tree, KernelSpec.stationary(1.0, 300.0, 0.1), ll)
    y = mra.simulate(prior, rng)
    return ll, tree, prior, y


@pytest.fixture(scope="module")
def toy():
    return _toy()


def _free_ports(k):
    socks = [socket.socket() for _ in range(k)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


class TestPlan:
    def test_single_node_all_local(self, toy):
        plan = make_plan(toy[1], 1)
        assert all(r.kind == "local" and not r.workers for r in plan.roles.values())
        assert plan.sync_pairs == []

    def test_toy_three_nodes(self, toy):
        plan = make_plan(toy[1], 3)
        assert [len(plan.leaves_of(k)) for k in range(3)] == [3, 3, 2]
        assert plan.role_of((3, 0), 0) == "local"
        assert plan.role_of((3, 1), 0) == "supervisor"
        assert plan.role_of((3, 1), 1) == "worker"
        assert plan.working_set(0, 3) == [0, 1]
        assert plan.sync_pairs == [((3, 1), 1), ((2, 1), 2), ((1, 0), 1)]

    def test_one_leaf_per_node(self, toy):
        plan = make_plan(toy[1], 8)
        for i in range(4):
            role = plan.roles[(3, i)]
            assert role.kind == "sync" and role.supervisor == 2 * i and role.workers == (2 * i + 1,)

    def test_too_many_nodes(self, toy):
        with pytest.raises(PlanError, match="exceed"):
            make_plan(toy[1], 9)
        with pytest.raises(PlanError):
            make_plan(toy[1], 0)

    def test_audit_flags_tampering(self, toy):
        plan = make_plan(toy[1], 3)
        assert audit_plan(plan) == []
        plan.leaf_node[0], plan.leaf_node[7] = plan.leaf_node[7], plan.leaf_node[0]
        assert any("contiguous" in p for p in audit_plan(plan))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 5), st.integers(1, 16))
    def test_plan_invariants(self, M, n_nodes):
        ll = uniform_locations(BOX, 200, np.random.default_rng(M))
        tree = regular_tree(BOX, M, 1, ll[:, 0], ll[:, 1])
        n_leaves = len(tree.leaves)
        if n_nodes > n_leaves:
            with pytest.raises(PlanError):
                make_plan(tree, n_nodes)
            return
        plan = make_plan(tree, n_nodes)
        assert audit_plan(plan) == []
        counts = [len(plan.leaves_of(k)) for k in range(n_nodes)]
        assert sum(counts) == n_leaves and max(counts) - min(counts) <= 1
        # every region finishes on exactly one node
        for m in range(1, M + 1):
            sets = [set(plan.working_set(k, m)) for k in range(n_nodes)]
            assert sum(len(s) for s in sets) == len(tree.regions(m))


class TestDistributedPosterior:
    @pytest.mark.parametrize("n_nodes", [1, 2, 3, 5, 8])
    def test_matches_serial(self, toy, n_nodes):
        ll, tree, prior, y = toy
        serial = mra.posterior_pass(prior, y)
        plan = make_plan(tree, n_nodes)
        dpost = run_distributed_posterior(prior, y, plan, timeout=20)
        merged = dpost.merged()
        assert merged.complete
        np.testing.assert_allclose(merged.loglik, serial.loglik, rtol=0, atol=1e-12 * abs(serial.loglik))
        for key, rp in serial.regions.items():
            np.testing.assert_allclose(merged.regions[key].h, rp.h, atol=1e-12)
            np.testing.assert_allclose(merged.regions[key].Lbb, rp.Lbb, atol=1e-12)
        if n_nodes == 1:
            assert merged.loglik == serial.loglik

    @pytest.mark.parametrize("n_nodes", [1, 3, 8])
    def test_message_conservation(self, toy, n_nodes):
        _, tree, prior, y = toy
        plan = make_plan(tree, n_nodes)
        hub = LoopbackHub(n_nodes)
        dpost = run_distributed_posterior(prior, y, plan, hub.transports, timeout=20)
        assert dpost.messages == hub.sent_by_kind(UP) == len(plan.sync_pairs)
        assert hub.total_sent == len(plan.sync_pairs)

    def test_node_priors_restricted_to_own_leaves(self, toy):
        ll, tree, prior, y = toy
        plan = make_plan(tree, 3)
        spec = prior.spec
        priors = [mra.build_prior(tree, spec, ll, leaves=plan.leaves_of(k)) for k in range(3)]
        dpost = run_distributed_posterior(priors, y, plan, timeout=20)
        np.testing.assert_allclose(dpost.merged().loglik, mra.loglik(prior, y), rtol=1e-12)

    def test_dropped_message_times_out_naming_region(self, toy):
        _, tree, prior, y = toy
        plan = make_plan(tree, 3)
        hub = LoopbackHub(3)
        ts = list(hub.transports)
        ts[1] = FaultyTransport(hub[1], drop={(3, 1)})
        with pytest.raises(TransportTimeout, match=r"region \(3, 1\) from node 1") as info:
            run_distributed_posterior(prior, y, plan, ts, timeout=1.0)
        assert info.value.missing == [(UP, 3, 1, 1)]

    def test_corrupted_message_aborts(self, toy):
        _, tree, prior, y = toy
        plan = make_plan(tree, 3)
        hub = LoopbackHub(3)
        ts = list(hub.transports)
        ts[2] = FaultyTransport(hub[2], corrupt={(2, 1)})
        with pytest.raises(ChecksumError, match=r"\(2, 1\)"):
            run_distributed_posterior(prior, y, plan, ts, timeout=5.0)

    def test_socket_transport(self, toy):
        _, tree, prior, y = toy
        plan = make_plan(tree, 3)
        addrs = [f"127.0.0.1:{p}" for p in _free_ports(3)]
        ts = [SocketTransport(k, addrs) for k in range(3)]
        try:
            dpost = run_distributed_posterior(prior, y, plan, ts, timeout=20)
            np.testing.assert_allclose(dpost.merged().loglik, mra.loglik(prior, y), rtol=1e-12)
        finally:
            for t in ts:
                t.close()


class TestDistributedPredict:
    @pytest.mark.parametrize("n_nodes", [1, 3, 8])
    def test_matches_serial(self, toy, n_nodes):
        ll, tree, prior, y = toy
        tg = uniform_locations(BOX, 150, np.random.default_rng(11))
        tg = np.vstack([tg, [[40.0, 0.0]]])
        ref = mra.predict(mra.posterior_pass(prior, y), tg[:-1], include_nugget=True)
        plan = make_plan(tree, n_nodes)
        dpost = run_distributed_posterior(prior, y, plan, timeout=20)
        pf = run_distributed_predict(dpost, tg, include_nugget=True, timeout=20)
        np.testing.assert_allclose(pf.mean[:-1], ref.mean, atol=1e-12)
        np.testing.assert_allclose(pf.sd[:-1], ref.sd, atol=1e-12)
        assert np.isnan(pf.mean[-1]) and list(pf.errors) == [150]

    def test_downward_messages(self, toy):
        _, tree, prior, y = toy
        plan = make_plan(tree, 3)
        hub = LoopbackHub(3)
        dpost = run_distributed_posterior(prior, y, plan, hub.transports, timeout=20)
        run_distributed_predict(dpost, uniform_locations(BOX, 20, np.random.default_rng(0)), timeout=20)
        assert hub.sent_by_kind(DOWN) == len(plan.sync_pairs)


class TestWire:
    def _msg(self):
        payload = mra.encode_blocks([(3, 1, "F", np.eye(3)), (3, 1, "g", np.arange(3.0))])
        return SyncMessage(UP, 3, 1, 2, payload)

    def test_header_size(self):
        assert HEADER.size == 29

    def test_roundtrip(self):
        msg = self._msg()
        back = decode_frame(msg.encode())
        assert back.key == msg.key and back.payload == msg.payload
        _, blocks = mra.decode_blocks(back.payload)
        np.testing.assert_array_equal(blocks[0][3], np.eye(3))

    def test_bad_magic(self):
        frame = bytearray(self._msg().encode())
        frame[:4] = b"XXXX"
        with pytest.raises(FrameError, match="magic"):
            decode_header(bytes(frame))

    def test_bad_version(self):
        frame = bytearray(self._msg().encode())
        frame[4] = 9
        with pytest.raises(FrameError, match="version"):
            decode_frame(bytes(frame))

    def test_truncated(self):
        with pytest.raises(FrameError, match="truncated"):
            decode_frame(self._msg().encode()[:-5])

    def test_checksum(self):
        frame = bytearray(self._msg().encode())
        frame[HEADER.size + 3] ^= 1
        with pytest.raises(ChecksumError):
            decode_frame(bytes(frame))

    def test_duplicates_delivered_once(self):
        hub = LoopbackHub(2)
        msg = self._msg()
        hub[0].send(1, msg)
        hub[0].send(1, msg)
        got = hub[1].receive({msg.key}, timeout=1)
        assert list(got) == [msg.key]
        with pytest.raises(TransportTimeout):
            hub[1].receive({msg.key}, timeout=0.6)
