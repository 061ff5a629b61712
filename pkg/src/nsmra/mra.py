"""Multi-resolution approximation (M-RA) of a Gaussian process over a region tree.

Conventions
-----------
``w_0`` is the latent covariance (no nugget). A non-leaf region ``A`` at level
``m`` with knots ``Q_A`` carries basis functions ``b_A(s) = w_{m-1}(s, Q_A)``
and weights ``eta_A ~ N(0, K_A^{-1})`` with ``K_A = w_{m-1}(Q_A, Q_A)``. Leaves
(level M) use their observations as knots and are treated as the data layer:
inside leaf ``L`` the observations have covariance ``w_{M-1}(O, O) + diag(tau2)``
given the coarser weights, and leaves are conditionally independent.

The posterior over the non-leaf weights is computed leaf-to-root by
eliminating each region's own block from an information matrix over its
ancestor chain and passing the Schur complement to the parent. Writing the
result as ``eta_A = h_A + S_A eta_anc + e_A`` with ``e_A ~ N(0, F_bb^{-1})``
gives means top-down and lets predictive covariances be accumulated by
pushing coefficient rows up the tree.
"""

from __future__ import annotations

import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize

from ._parallel import pmap
from .covariance import KernelSpec, Sites, StationaryMaternParams
from .partition import RegionTree, assign_observations

logger = logging.getLogger(__name__)

JITTERS = (0.0, 1e-10, 1e-8, 1e-6)
ORACLE_MAX_N = 5000
LOG2PI = math.log(2.0 * math.pi)


class MRANumericalError(RuntimeError):
    pass


class OutsideDomainError(ValueError):
    pass


# ------------------------------------------------------------- linear algebra


def robust_cholesky(A, label="matrix"):
    """Lower Cholesky factor with jitter escalation; returns (L, jitter added)."""
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale):
        raise MRANumericalError(f"{label}: non-finite entries")
    scale = scale if scale > 0 else 1.0
    eye = np.eye(n)
    for j in JITTERS:
        try:
            L = scipy.linalg.cholesky(A + (j * scale) * eye if j else A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            if j:
                logger.info("%s: Cholesky needed jitter %.0e x mean diagonal", label, j)
            return L, j * scale
    raise MRANumericalError(f"{label}: not positive definite after jitter escalation to 1e-6")


def _tri(L, B):
    if L.shape[0] == 0:
        return np.zeros((0,) + np.shape(B)[1:])
    return scipy.linalg.solve_triangular(L, B, lower=True, check_finite=False)


def _cho(L, B):
    if L.shape[0] == 0:
        return np.zeros((0,) + np.shape(B)[1:])
    return scipy.linalg.cho_solve((L, True), B, check_finite=False)


def _logdet(L):
    return 2.0 * float(np.sum(np.log(np.diag(L)))) if L.shape[0] else 0.0


# ----------------------------------------------------------------- the prior


@dataclass
class RegionPrior:
    level: int
    index: int
    parent: int | None
    children: list
    chain: list  # ancestor indices at levels 1..level-1
    knots: Sites
    K: np.ndarray  # w_{m-1}(Q, Q) including any jitter
    L: np.ndarray
    T: list  # T[i] = K_i^{-1} w_i(Q_i, Q) for the ancestor at level i+1
    jitter: float = 0.0

    @property
    def r(self):
        return len(self.knots)

    @property
    def logdetK(self):
        return _logdet(self.L)


@dataclass
class LeafPrior:
    index: int
    parent: int | None
    chain: list  # ancestor indices at levels 1..M-1
    obs: np.ndarray  # rows of the observation vector held by this leaf
    sites: Sites
    U: list  # U[i] = w_i(O, Q_i) for the ancestor at level i+1
    Z: list  # K_i^{-1} U[i]^T
    W: np.ndarray  # w_{M-1}(O, O)
    Ls: np.ndarray  # chol(W + diag(tau2))
    jitter: float = 0.0
    _LW: np.ndarray | None = None

    @property
    def n(self):
        return len(self.obs)

    @property
    def U_cat(self):
        return np.hstack(self.U) if self.U else np.zeros((self.n, 0))

    def LW(self):
        if self._LW is None:
            self._LW, _ = robust_cholesky(self.W, f"leaf {self.index} knot covariance")
        return self._LW


@dataclass
class PriorQuantities:
    tree: RegionTree
    spec: KernelSpec
    regions: dict  # (level, index) -> RegionPrior for levels 1..M-1
    leaves: list  # LeafPrior per level-M region
    n_obs: int
    obs_lonlat: np.ndarray
    rejected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def M(self):
        return self.tree.depth

    def region(self, level, index) -> RegionPrior:
        return self.regions[(level, index)]

    def chain_regions(self, level, chain):
        return [self.regions[(j + 1, c)] for j, c in enumerate(chain)]

    def chain_sizes(self, chain):
        return [self.regions[(j + 1, c)].r for j, c in enumerate(chain)]


def basis_chain(spec: KernelSpec, chain_regions, X: Sites):
    """U_j(X) = w_{j-1}(X, Q_j) for each region along an ancestor chain."""
    U = []
    for j, A in enumerate(chain_regions):
        u = spec.latent(X, A.knots)
        for i in range(j):
            if U[i].shape[1] and u.shape[1]:
                u -= U[i] @ A.T[i]
        U.append(u)
    return U


def _remainder(spec, X, Y, Ux, Uy, chain_regions):
    """w_k(X, Y) after subtracting every level along the chain."""
    w = spec.latent(X, Y)
    for A, ux, uy in zip(chain_regions, Ux, Uy):
        if A.r:
            w -= _tri(A.L, ux.T).T @ _tri(A.L, uy.T)
    return w


def _build_region(spec, tree, regions, level, index):
    reg = tree.region(level, index)
    chain = tree.ancestors(level, index)[:-1]
    chain_regs = [regions[(j + 1, c)] for j, c in enumerate(chain)]
    Q = spec.sites(reg.knots)
    U = basis_chain(spec, chain_regs, Q)
    K = _remainder(spec, Q, Q, U, U, chain_regs)
    K = 0.5 * (K + K.T)
    L, jit = robust_cholesky(K, f"region {(level, index)} knot covariance")
    if jit:
        K = K + jit * np.eye(len(K))
    T = [_cho(A.L, u.T) for A, u in zip(chain_regs, U)]
    return RegionPrior(level, index, reg.parent, list(reg.children), chain, Q, K, L, T, jit)


def _build_leaf(spec, tree, regions, index, obs_idx, lonlat):
    reg = tree.leaves[index]
    M = tree.depth
    chain = tree.ancestors(M, index)[:-1]
    chain_regs = [regions[(j + 1, c)] for j, c in enumerate(chain)]
    O = spec.sites(lonlat[obs_idx]) if len(obs_idx) else spec.sites(np.empty((0, 2)))
    U = basis_chain(spec, chain_regs, O)
    Z = [_cho(A.L, u.T) for A, u in zip(chain_regs, U)]
    W = _remainder(spec, O, O, U, U, chain_regs)
    W = 0.5 * (W + W.T)
    Sig = W.copy()
    Sig[np.diag_indices_from(Sig)] += O.tau2 if spec.include_nugget else 0.0
    Ls, jit = robust_cholesky(Sig, f"leaf {(M, index)} data covariance")
    return LeafPrior(index, reg.parent, chain, obs_idx, O, U, Z, W, Ls, jit)


def build_prior(tree: RegionTree, spec: KernelSpec, lonlat=None, n_jobs=1, leaves=None) -> PriorQuantities:
    """Evaluate the basis/prior recursion root-to-leaf.

    ``lonlat`` are the observation locations (they become the leaf knots);
    when omitted the tree's leaf knots are used in leaf order. ``leaves``
    restricts leaf-level work to a subset (other entries are None), as
    needed by a node of a distributed run.
    """
    if tree.depth != tree.M:
        raise ValueError(f"tree has {tree.depth} levels but M={tree.M}; run auto_split first")
    M = tree.depth
    if lonlat is None:
        parts = [reg.knots for reg in tree.leaves]
        lonlat = np.vstack(parts) if parts else np.empty((0, 2))
        counts = np.cumsum([0] + [len(p) for p in parts])
        leaf_obs = [np.arange(counts[i], counts[i + 1]) for i in range(len(parts))]
        rejected = np.zeros(0, dtype=np.intp)
    else:
        lonlat = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
        member = assign_observations(tree, lonlat[:, 0], lonlat[:, 1])
        leaf_of = member.leaf
        order = np.argsort(leaf_of, kind="stable")
        bounds = np.searchsorted(leaf_of[order], np.arange(len(tree.leaves) + 1))
        leaf_obs = [order[bounds[i]:bounds[i + 1]] for i in range(len(tree.leaves))]
        rejected = np.nonzero(leaf_of < 0)[0]
    regions = {}
    for m in range(1, M):
        built = pmap(lambda i: _build_region(spec, tree, regions, m, i), range(len(tree.regions(m))), n_jobs)
        for rp in built:
            regions[(rp.level, rp.index)] = rp
    todo = range(len(tree.leaves)) if leaves is None else sorted(leaves)
    built = pmap(lambda i: _build_leaf(spec, tree, regions, i, leaf_obs[i], lonlat), todo, n_jobs)
    leaves = [None] * len(tree.leaves)
    for i, lf in zip(todo, built):
        leaves[i] = lf
    return PriorQuantities(tree, spec, regions, leaves, len(lonlat), lonlat, rejected)


# ------------------------------------------------------- point evaluations


@dataclass
class _Group:
    leaf: int
    rows: np.ndarray
    sites: Sites
    U: list


def _groups(prior: PriorQuantities, lonlat):
    lonlat = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
    member = assign_observations(prior.tree, lonlat[:, 0], lonlat[:, 1])
    leaf_of = member.leaf
    groups = []
    for li in np.unique(leaf_of[leaf_of >= 0]):
        rows = np.nonzero(leaf_of == li)[0]
        leaf = prior.leaves[li]
        X = prior.spec.sites(lonlat[rows])
        U = basis_chain(prior.spec, prior.chain_regions(prior.M, leaf.chain), X)
        groups.append(_Group(int(li), rows, X, U))
    return groups, np.nonzero(leaf_of < 0)[0]


def implied_cov(prior: PriorQuantities, s, t=None, remainder=False, levels=None):
    """Covariance implied by the basis expansion between location sets ``s`` and ``t``.

    The default is the pure basis sum over levels 1..M. With
    ``remainder=True`` the leaf level contributes ``w_{M-1}(s, t)`` instead of
    its knot interpolant, which is the covariance of the full data-layer
    process and the one predictive variances refer to. ``levels`` restricts
    the sum to a subset of levels.
    """
    same = t is None
    gs, bad_s = _groups(prior, s)
    gt, bad_t = (gs, bad_s) if same else _groups(prior, t)
    if len(bad_s) or len(bad_t):
        raise OutsideDomainError("locations outside the level-1 regions: "
                                 f"{len(bad_s)} in s, {len(bad_t)} in t")
    ns = len(np.asarray(s).reshape(-1, 2))
    nt = ns if same else len(np.asarray(t).reshape(-1, 2))
    M = prior.M
    levels = set(range(1, M + 1) if levels is None else levels)
    out = np.zeros((ns, nt))
    spec = prior.spec
    for a in gs:
        la = prior.leaves[a.leaf]
        chain_a = prior.chain_regions(M, la.chain)
        Va = [_tri(A.L, u.T) for A, u in zip(chain_a, a.U)]
        for b in gt:
            lb = prior.leaves[b.leaf]
            block = np.zeros((len(a.rows), len(b.rows)))
            for j, (A, ca, cb) in enumerate(zip(chain_a, la.chain, lb.chain)):
                if ca != cb:
                    break
                if (j + 1) in levels and A.r:
                    block += Va[j].T @ _tri(A.L, b.U[j].T)
            if a.leaf == b.leaf and M in levels:
                if remainder:
                    block += _remainder(spec, a.sites, b.sites, a.U, b.U, chain_a)
                elif la.n:
                    wa = _remainder(spec, a.sites, la.sites, a.U, la.U, chain_a)
                    wb = _remainder(spec, b.sites, la.sites, b.U, la.U, chain_a)
                    LW = la.LW()
                    block += _tri(LW, wa.T).T @ _tri(LW, wb.T)
            out[np.ix_(a.rows, b.rows)] = block
    return out


def basis_functions(prior: PriorQuantities, lonlat):
    """Dense basis matrices ``b_m(s)`` per level (columns ordered by region, then knot)."""
    lonlat = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
    groups, bad = _groups(prior, lonlat)
    if len(bad):
        raise OutsideDomainError(f"{len(bad)} locations outside the level-1 regions")
    M = prior.M
    offsets = []
    for m in range(1, M):
        sizes = [prior.region(m, i).r for i in range(len(prior.tree.regions(m)))]
        offsets.append(np.concatenate([[0], np.cumsum(sizes)]))
    leaf_sizes = [lf.n for lf in prior.leaves]
    offsets.append(np.concatenate([[0], np.cumsum(leaf_sizes)]))
    out = [np.zeros((len(lonlat), int(o[-1]))) for o in offsets]
    for g in groups:
        leaf = prior.leaves[g.leaf]
        for j, c in enumerate(leaf.chain):
            out[j][np.ix_(g.rows, np.arange(offsets[j][c], offsets[j][c + 1]))] = g.U[j]
        chain = prior.chain_regions(M, leaf.chain)
        wl = _remainder(prior.spec, g.sites, leaf.sites, g.U, leaf.U, chain)
        out[M - 1][np.ix_(g.rows, np.arange(offsets[M - 1][g.leaf], offsets[M - 1][g.leaf + 1]))] = wl
    return out


# ------------------------------------------------------------- the posterior


@dataclass
class RegionPosterior:
    level: int
    index: int
    Lbb: np.ndarray
    S: np.ndarray  # -F_bb^{-1} F_ba
    h: np.ndarray  # F_bb^{-1} g_b
    logdet: float
    quad: float
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None


@dataclass
class LeafPosterior:
    index: int
    alpha: np.ndarray  # Sigma^{-1} y
    SiU: np.ndarray  # Sigma^{-1} U_cat
    logdet: float
    quad: float


@dataclass
class Message:
    """Information passed from a region to its parent (over the parent's chain)."""

    F: np.ndarray
    g: np.ndarray


@dataclass
class PosteriorState:
    prior: PriorQuantities
    y: np.ndarray
    regions: dict = field(default_factory=dict)
    leaves: dict = field(default_factory=dict)
    loglik: float = float("nan")
    complete: bool = False

    def region(self, level, index) -> RegionPosterior:
        return self.regions[(level, index)]

    def chain_mean(self, chain):
        parts = [self.regions[(j + 1, c)].mean for j, c in enumerate(chain)]
        return np.concatenate(parts) if parts else np.zeros(0)


def leaf_message(prior: PriorQuantities, index, y):
    """Posterior contribution of one leaf's data; returns (LeafPosterior, Message)."""
    leaf = prior.leaves[index]
    yl = np.asarray(y, dtype=np.float64)[leaf.obs]
    A = _tri(leaf.Ls, leaf.U_cat)
    b = _tri(leaf.Ls, yl)
    lp = LeafPosterior(index, _cho(leaf.Ls, yl), _cho(leaf.Ls, leaf.U_cat),
                       _logdet(leaf.Ls), float(b @ b))
    return lp, Message(A.T @ A, A.T @ b)


def eliminate(prior: PriorQuantities, level, index, messages):
    """Absorb children's messages (in child order) and eliminate this region's weights."""
    rp = prior.region(level, index)
    n_anc = sum(prior.chain_sizes(rp.chain))
    n = n_anc + rp.r
    F = np.zeros((n, n))
    g = np.zeros(n)
    for msg in messages:
        F += msg.F
        g += msg.g
    F[n_anc:, n_anc:] += rp.K
    Fbb = F[n_anc:, n_anc:]
    Fba = F[n_anc:, :n_anc]
    try:
        Lbb, _ = robust_cholesky(0.5 * (Fbb + Fbb.T), f"region {(level, index)} posterior precision")
    except MRANumericalError as exc:
        raise MRANumericalError(f"posterior solve failed at level {level}, region {index}: {exc}") from exc
    X = _cho(Lbb, np.column_stack([Fba, g[n_anc:]]))
    S = -X[:, :n_anc]
    h = X[:, n_anc]
    gb = _tri(Lbb, g[n_anc:])
    post = RegionPosterior(level, index, Lbb, S, h, _logdet(Lbb), float(gb @ gb))
    Fs = F[:n_anc, :n_anc] + Fba.T @ S
    return post, Message(0.5 * (Fs + Fs.T), g[:n_anc] - Fba.T @ h)


def top_down(state: PosteriorState, level, index):
    rp = state.regions[(level, index)]
    chain = state.prior.region(level, index).chain
    mu_anc = state.chain_mean(chain)
    rp.mean = rp.h + rp.S @ mu_anc if len(mu_anc) else rp.h.copy()


def finalize_loglik(state: PosteriorState):
    prior = state.prior
    logdet = sum(lp.logdet for lp in state.leaves.values())
    quad = sum(lp.quad for lp in state.leaves.values())
    for key, rp in state.regions.items():
        logdet += rp.logdet - prior.regions[key].logdetK
        quad -= rp.quad
    n = sum(len(lp.alpha) for lp in state.leaves.values())
    state.loglik = -0.5 * (n * LOG2PI + logdet + quad)
    return state.loglik


def posterior_pass(prior: PriorQuantities, y, n_jobs=1, covariances=False) -> PosteriorState:
    """Exact posterior of all non-leaf weights given the data, leaf-to-root then root-to-leaf."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) != prior.n_obs:
        raise ValueError(f"expected {prior.n_obs} observations, got {len(y)}")
    state = PosteriorState(prior, y)
    M = prior.M
    results = pmap(lambda i: leaf_message(prior, i, y), range(len(prior.leaves)), n_jobs)
    msgs = {}
    for i, (lp, msg) in enumerate(results):
        state.leaves[i] = lp
        msgs[(M, i)] = msg
    for m in range(M - 1, 0, -1):
        regs = prior.tree.regions(m)

        def run(i, m=m):
            kids = prior.region(m, i).children
            return eliminate(prior, m, i, [msgs[(m + 1, c)] for c in kids])

        for i, (post, msg) in enumerate(pmap(run, range(len(regs)), n_jobs)):
            state.regions[(m, i)] = post
            msgs[(m, i)] = msg
    for m in range(1, M):
        for i in range(len(prior.tree.regions(m))):
            top_down(state, m, i)
    finalize_loglik(state)
    state.complete = True
    if covariances:
        fill_covariances(state)
    return state


def fill_covariances(state: PosteriorState):
    """Posterior covariance block of every region's weights."""
    prior = state.prior
    chain_cov = {}
    for m in range(1, prior.M):
        for i in range(len(prior.tree.regions(m))):
            rp = state.regions[(m, i)]
            reg = prior.region(m, i)
            Finv = _cho(rp.Lbb, np.eye(reg.r))
            if m == 1:
                full = Finv
            else:
                Sp = chain_cov[(m - 1, reg.parent)]
                cross = rp.S @ Sp
                own = Finv + cross @ rp.S.T
                full = np.block([[Sp, cross.T], [cross, own]])
            chain_cov[(m, i)] = full
            rp.cov = full[-reg.r:, -reg.r:] if reg.r else np.zeros((0, 0))
    return state


# ---------------------------------------------------------------- prediction


@dataclass
class PredictionField:
    lonlat: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    cov: np.ndarray | None = None
    errors: dict = field(default_factory=dict)


def _leaf_terms(prior, state_like, g: _Group):
    """Mean, coefficient rows G over the leaf's chain, and same-leaf covariance pieces."""
    leaf = prior.leaves[g.leaf]
    chain_regs = prior.chain_regions(prior.M, leaf.chain)
    Ucat = np.hstack(g.U) if g.U else np.zeros((len(g.rows), 0))
    wXO = prior.spec.latent(g.sites, leaf.sites)
    for u, z in zip(g.U, leaf.Z):
        if u.shape[1]:
            wXO -= u @ z
    lp = state_like.leaves[g.leaf]
    G = Ucat - wXO @ lp.SiU
    mu = state_like.chain_mean(leaf.chain)
    mean = wXO @ lp.alpha
    if G.shape[1]:
        mean = mean + G @ mu
    A1 = _tri(leaf.Ls, wXO.T)
    return mean, G, A1, chain_regs


def _propagate_diag(state_like, chain, sizes, G):
    var = np.zeros(G.shape[0])
    c = G.copy()
    offs = np.concatenate([[0], np.cumsum(sizes)])
    for j in range(len(chain) - 1, -1, -1):
        rp = state_like.regions[(j + 1, chain[j])]
        blk = c[:, offs[j]:offs[j + 1]]
        if blk.shape[1]:
            z = _tri(rp.Lbb, blk.T)
            var += np.einsum("ij,ij->j", z, z)
            if offs[j]:
                c[:, :offs[j]] += blk @ rp.S
    return var


def predict(state, lonlat, joint=False, include_nugget=False, n_jobs=1, prior=None) -> PredictionField:
    """Posterior predictive mean and sd of the process at ``lonlat``.

    ``include_nugget`` adds the measurement-error variance, giving the
    predictive distribution of a new observation. ``joint`` also returns the
    full covariance (at most 1000 locations).
    """
    prior = prior or state.prior
    lonlat = np.asarray(lonlat, dtype=np.float64).reshape(-1, 2)
    n = len(lonlat)
    if joint and n > 1000:
        raise ValueError("joint covariance limited to 1000 locations")
    mean = np.full(n, np.nan)
    sd = np.full(n, np.nan)
    groups, bad = _groups(prior, lonlat)
    errors = {int(i): "location outside the region tree" for i in bad}
    spec = prior.spec

    def run(g):
        leaf = prior.leaves[g.leaf]
        mu, G, A1, chain_regs = _leaf_terms(prior, state, g)
        wss = spec.latent_diag(g.sites) - sum(
            (np.einsum("ij,ij->j", v, v) for v in (_tri(A.L, u.T) for A, u in zip(chain_regs, g.U) if A.r)),
            np.zeros(len(g.rows)))
        var = wss - np.einsum("ij,ij->j", A1, A1)
        var += _propagate_diag(state, leaf.chain, prior.chain_sizes(leaf.chain), G)
        if include_nugget and spec.include_nugget:
            var += g.sites.tau2
        return mu, np.sqrt(np.maximum(var, 0.0))

    for g, (mu, s) in zip(groups, pmap(run, groups, n_jobs)):
        mean[g.rows] = mu
        sd[g.rows] = s
    cov = None
    if joint:
        cov = _joint_cov(prior, state, groups, n, include_nugget)
    return PredictionField(lonlat, mean, sd, cov, errors)


def _joint_cov(prior, state, groups, n, include_nugget):
    M = prior.M
    spec = prior.spec
    cov = np.zeros((n, n))
    coef = {}
    terms = []
    for g in groups:
        leaf = prior.leaves[g.leaf]
        _, G, A1, chain_regs = _leaf_terms(prior, state, g)
        terms.append((g, A1, chain_regs))
        sizes = prior.chain_sizes(leaf.chain)
        offs = np.concatenate([[0], np.cumsum(sizes)])
        for j, c in enumerate(leaf.chain):
            key = (j + 1, c)
            if key not in coef:
                coef[key] = np.zeros((n, sizes[j]))
            coef[key][g.rows] += G[:, offs[j]:offs[j + 1]]
    for m in range(M - 1, 0, -1):
        for i in range(len(prior.tree.regions(m))):
            blk = coef.get((m, i))
            if blk is None or blk.shape[1] == 0:
                continue
            rp = state.regions[(m, i)]
            z = _tri(rp.Lbb, blk.T)
            cov += z.T @ z
            reg = prior.region(m, i)
            if reg.chain:
                push = blk @ rp.S
                off = 0
                for j, (c, r) in enumerate(zip(reg.chain, prior.chain_sizes(reg.chain))):
                    key = (j + 1, c)
                    if key not in coef:
                        coef[key] = np.zeros((n, r))
                    coef[key] += push[:, off:off + r]
                    off += r
    for g, A1, chain_regs in terms:
        w = _remainder(spec, g.sites, g.sites, g.U, g.U, chain_regs) - A1.T @ A1
        cov[np.ix_(g.rows, g.rows)] += w
        if include_nugget and spec.include_nugget:
            cov[g.rows, g.rows] += g.sites.tau2
    return 0.5 * (cov + cov.T)


# -------------------------------------------------------------------- oracle


def dense_gp_oracle(y, C_yy, C_ty, C_tt):
    """Textbook conditional Gaussian: mean and covariance of targets given y."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) > ORACLE_MAX_N:
        raise ValueError(f"dense oracle limited to n <= {ORACLE_MAX_N}, got {len(y)}")
    if len(y) == 0:
        return np.zeros(C_tt.shape[0]), C_tt.copy()
    cf = scipy.linalg.cho_factor(C_yy, lower=True)
    mean = C_ty @ scipy.linalg.cho_solve(cf, y)
    cov = C_tt - C_ty @ scipy.linalg.cho_solve(cf, C_ty.T)
    return mean, cov


def dense_loglik(y, C_yy):
    y = np.asarray(y, dtype=np.float64)
    if len(y) > ORACLE_MAX_N:
        raise ValueError(f"dense likelihood limited to n <= {ORACLE_MAX_N}")
    L = np.linalg.cholesky(C_yy)
    b = np.linalg.solve(L, y)
    return -0.5 * (len(y) * LOG2PI + 2.0 * np.sum(np.log(np.diag(L))) + b @ b)


def nugget_diag(prior: PriorQuantities, lonlat):
    if not prior.spec.include_nugget:
        return np.zeros(len(lonlat))
    return prior.spec.sites(lonlat).tau2


def oracle_predict(prior: PriorQuantities, y, targets, include_nugget=False):
    """Dense-GP predictions using the full-process implied covariance."""
    O = prior.obs_lonlat
    keep = np.setdiff1d(np.arange(len(O)), prior.rejected)
    O, y = O[keep], np.asarray(y)[keep]
    C_yy = implied_cov(prior, O, remainder=True)
    C_yy[np.diag_indices_from(C_yy)] += nugget_diag(prior, O)
    C_ty = implied_cov(prior, targets, O, remainder=True)
    C_tt = implied_cov(prior, targets, remainder=True)
    if include_nugget:
        C_tt[np.diag_indices_from(C_tt)] += nugget_diag(prior, targets)
    return dense_gp_oracle(y, C_yy, C_ty, C_tt)


# -------------------------------------------------------------- likelihood


def loglik(prior: PriorQuantities, y, n_jobs=1):
    """Log-likelihood of ``y``; an (n, k) array is k independent replicate fields."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        return float(sum(posterior_pass(prior, y[:, j], n_jobs=n_jobs).loglik for j in range(y.shape[1])))
    return posterior_pass(prior, y, n_jobs=n_jobs).loglik


@dataclass
class MLEResult:
    params: StationaryMaternParams
    loglik: float
    loglik_init: float
    converged: bool
    nfev: int


def stationary_mle_mra(lonlat, y, tree: RegionTree, init: StationaryMaternParams, fit_nu=False,
                       maxiter=400, n_jobs=1, radius=None) -> MLEResult:
    """Maximum likelihood for stationary Matérn parameters under the M-RA likelihood.

    ``y`` may be (n, k): k independent fields observed at the same locations.
    """
    lonlat = np.asarray(lonlat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    kw = {} if radius is None else {"radius": radius}

    def unpack(x):
        s2, b, t2 = np.exp(x[:3])
        nu = float(np.exp(x[3])) if fit_nu else init.nu
        return StationaryMaternParams(float(s2), float(b), nu, float(t2))

    def nll(x):
        if np.any(np.abs(x) > 50):
            return 1e300
        try:
            p = unpack(x)
            spec = KernelSpec.stationary(p.sigma2, p.beta, p.tau2, p.nu, **kw)
            val = -loglik(build_prior(tree, spec, lonlat, n_jobs), y, n_jobs)
        except (MRANumericalError, np.linalg.LinAlgError, ValueError):
            return 1e300
        return val if np.isfinite(val) else 1e300

    x0 = np.log([init.sigma2, init.beta, max(init.tau2, 1e-6 * init.sigma2)])
    if fit_nu:
        x0 = np.append(x0, math.log(init.nu))
    f0 = nll(x0)
    res = scipy.optimize.minimize(nll, x0, method="Nelder-Mead",
                                  options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-6})
    if not res.success:
        warnings.warn(f"stationary MLE did not converge: {res.message}", RuntimeWarning, stacklevel=2)
    x = res.x if res.fun <= f0 else x0
    return MLEResult(unpack(x), -min(res.fun, f0), -f0, bool(res.success), int(res.nfev))


# ----------------------------------------------------------------- sampling


def simulate(prior: PriorQuantities, rng, nugget=True):
    """Draw the process at the observation locations (rows follow ``prior.obs_lonlat``)."""
    eta = {}
    for key in sorted(prior.regions):
        rp = prior.regions[key]
        z = rng.standard_normal(rp.r)
        eta[key] = scipy.linalg.solve_triangular(rp.L, z, lower=True, trans="T") if rp.r else z
    y = np.full(prior.n_obs, np.nan)
    for leaf in prior.leaves:
        if leaf.n == 0:
            continue
        v = np.zeros(leaf.n)
        for j, (c, u) in enumerate(zip(leaf.chain, leaf.U)):
            if u.shape[1]:
                v += u @ eta[(j + 1, c)]
        if nugget and prior.spec.include_nugget:
            v += leaf.Ls @ rng.standard_normal(leaf.n)
        else:
            v += leaf.LW() @ rng.standard_normal(leaf.n)
        y[leaf.obs] = v
    return y


# ------------------------------------------------------------ serialization

MAGIC = b"NSMB"
FORMAT_VERSION = 1
KIND_PRIOR, KIND_POSTERIOR, KIND_MESSAGE = 1, 2, 3
_DTYPES = {0: "<f8", 1: "<i8"}


def encode_blocks(blocks, kind=KIND_MESSAGE) -> bytes:
    """Pack ``(level, index, name, array)`` tuples into length-prefixed little-endian blocks."""
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<HBI", FORMAT_VERSION, kind, len(blocks)))
    for level, index, name, arr in blocks:
        arr = np.asarray(arr)
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nm = name.encode()
        body = (struct.pack("<HIB", level, index, len(nm)) + nm + struct.pack("<BB", code, arr.ndim)
                + struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", len(data)) + data)
        out.write(struct.pack("<Q", len(body)) + body)
    return out.getvalue()


def decode_blocks(buf: bytes):
    """Inverse of :func:`encode_blocks`; returns (kind, list of blocks)."""
    if buf[:4] != MAGIC:
        raise ValueError("bad magic in M-RA block stream")
    version, kind, nblk = struct.unpack_from("<HBI", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported M-RA block format version {version}")
    pos = 11
    blocks = []
    for _ in range(nblk):
        (blen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        end = pos + blen
        if end > len(buf):
            raise ValueError("truncated M-RA block stream")
        level, index, nlen = struct.unpack_from("<HIB", buf, pos)
        p = pos + 7
        name = buf[p:p + nlen].decode()
        p += nlen
        code, ndim = struct.unpack_from("<BB", buf, p)
        p += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, p)
        p += 8 * ndim
        (dlen,) = struct.unpack_from("<Q", buf, p)
        p += 8
        arr = np.frombuffer(buf[p:p + dlen], dtype=_DTYPES[code]).reshape(shape).copy()
        blocks.append((level, index, name, arr))
        pos = end
    if pos != len(buf):
        raise ValueError("trailing bytes in M-RA block stream")
    return kind, blocks


def _region_prior_blocks(rp: RegionPrior):
    b = [(rp.level, rp.index, "knots", rp.knots.lonlat), (rp.level, rp.index, "K", rp.K),
         (rp.level, rp.index, "L", rp.L)]
    b += [(rp.level, rp.index, f"T{i}", t) for i, t in enumerate(rp.T)]
    return b


def _leaf_prior_blocks(M, lf: LeafPrior):
    b = [(M, lf.index, "obs", lf.obs.astype(np.int64)), (M, lf.index, "W", lf.W), (M, lf.index, "Ls", lf.Ls)]
    b += [(M, lf.index, f"U{i}", u) for i, u in enumerate(lf.U)]
    b += [(M, lf.index, f"Z{i}", z) for i, z in enumerate(lf.Z)]
    return b


def save_prior(path, prior: PriorQuantities):
    blocks = [(0, 0, "obs_lonlat", prior.obs_lonlat), (0, 0, "rejected", prior.rejected.astype(np.int64))]
    for key in sorted(prior.regions):
        blocks += _region_prior_blocks(prior.regions[key])
    for lf in prior.leaves:
        blocks += _leaf_prior_blocks(prior.M, lf)
    Path(path).write_bytes(encode_blocks(blocks, KIND_PRIOR))


def _group_blocks(blocks):
    out = {}
    for level, index, name, arr in blocks:
        out.setdefault((level, index), {})[name] = arr
    return out


def load_prior(path, tree: RegionTree, spec: KernelSpec) -> PriorQuantities:
    kind, blocks = decode_blocks(Path(path).read_bytes())
    if kind != KIND_PRIOR:
        raise ValueError(f"{path}: not a prior file")
    g = _group_blocks(blocks)
    M = tree.depth
    regions = {}
    for m in range(1, M):
        for reg in tree.regions(m):
            d = g[(m, reg.index)]
            chain = tree.ancestors(m, reg.index)[:-1]
            regions[(m, reg.index)] = RegionPrior(
                m, reg.index, reg.parent, list(reg.children), chain, spec.sites(d["knots"]), d["K"], d["L"],
                [d[f"T{i}"] for i in range(len(chain))])
    obs_lonlat = g[(0, 0)]["obs_lonlat"]
    leaves = []
    for reg in tree.leaves:
        d = g[(M, reg.index)]
        chain = tree.ancestors(M, reg.index)[:-1]
        obs = d["obs"].astype(np.intp)
        leaves.append(LeafPrior(reg.index, reg.parent, chain, obs,
                                spec.sites(obs_lonlat[obs]) if len(obs) else spec.sites(np.empty((0, 2))),
                                [d[f"U{i}"] for i in range(len(chain))], [d[f"Z{i}"] for i in range(len(chain))],
                                d["W"], d["Ls"]))
    return PriorQuantities(tree, spec, regions, leaves, len(obs_lonlat), obs_lonlat,
                           g[(0, 0)]["rejected"].astype(np.intp))


def region_posterior_blocks(rp: RegionPosterior):
    b = [(rp.level, rp.index, "Lbb", rp.Lbb), (rp.level, rp.index, "S", rp.S), (rp.level, rp.index, "h", rp.h),
         (rp.level, rp.index, "scal", np.array([rp.logdet, rp.quad]))]
    if rp.mean is not None:
        b.append((rp.level, rp.index, "mean", rp.mean))
    if rp.cov is not None:
        b.append((rp.level, rp.index, "cov", rp.cov))
    return b


def region_posterior_from(level, index, d) -> RegionPosterior:
    return RegionPosterior(level, index, d["Lbb"], d["S"], d["h"], float(d["scal"][0]), float(d["scal"][1]),
                           d.get("mean"), d.get("cov"))


def leaf_posterior_blocks(M, lp: LeafPosterior):
    return [(M, lp.index, "alpha", lp.alpha), (M, lp.index, "SiU", lp.SiU),
            (M, lp.index, "scal", np.array([lp.logdet, lp.quad]))]


def leaf_posterior_from(index, d) -> LeafPosterior:
    return LeafPosterior(index, d["alpha"], d["SiU"], float(d["scal"][0]), float(d["scal"][1]))


def save_posterior(path, state: PosteriorState):
    M = state.prior.M
    blocks = [(0, 0, "y", state.y), (0, 0, "loglik", np.array([state.loglik]))]
    for key in sorted(state.regions):
        blocks += region_posterior_blocks(state.regions[key])
    for i in sorted(state.leaves):
        blocks += leaf_posterior_blocks(M, state.leaves[i])
    Path(path).write_bytes(encode_blocks(blocks, KIND_POSTERIOR))


def load_posterior(path, prior: PriorQuantities) -> PosteriorState:
    kind, blocks = decode_blocks(Path(path).read_bytes())
    if kind != KIND_POSTERIOR:
        raise ValueError(f"{path}: not a posterior file")
    g = _group_blocks(blocks)
    head = g.pop((0, 0))
    state = PosteriorState(prior, head["y"], loglik=float(head["loglik"][0]), complete=True)
    M = prior.M
    for (level, index), d in g.items():
        if level == M:
            state.leaves[index] = leaf_posterior_from(index, d)
        else:
            state.regions[(level, index)] = region_posterior_from(level, index, d)
    return state
