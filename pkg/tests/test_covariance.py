import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from nsmra import _core, _pykernels
from nsmra.covariance import (
    CovarianceDomainError,
    KernelSpec,
    LocalParams,
    StationaryMaternParams,
    cov_matrix,
    matern,
    matern_correlation,
    nonstationary_cov,
    range_prefactor,
    wendland,
)
from nsmra.geo import lonlat_to_xyz

from conftest import ns_spec
from oracles import matern_bessel, ns_exponential_loop, wendland_poly

pos = st.floats(1e-3, 1e4, allow_nan=False)


class TestMatern:
    def test_zero_lag_with_nugget(self):
        p = StationaryMaternParams(2.0, 100.0, 0.5, 0.3)
        assert matern(0.0, p, same_location=True) == pytest.approx(2.3)

    def test_exponential_at_range(self):
        p = StationaryMaternParams(1.7, 50.0, 0.5, 0.0)
        assert matern(50.0, p) == pytest.approx(1.7 * math.exp(-1), rel=1e-15)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_closed_forms_match_bessel(self, nu):
        h = np.linspace(0.0, 2000.0, 101)
        p = StationaryMaternParams(1.3, 300.0, nu, 0.0)
        ref = [matern_bessel(x, 1.3, 300.0, nu) for x in h]
        np.testing.assert_allclose(matern(h, p), ref, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("nu", [0.3, 0.8, 1.2, 3.7])
    def test_general_nu_matches_bessel(self, nu):
        h = np.linspace(0.0, 1500.0, 61)
        ref = [matern_bessel(x, 1.0, 250.0, nu) for x in h]
        np.testing.assert_allclose(matern_correlation(h, 250.0, nu), ref, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("nu", [0.5, 1.0, 1.5, 2.5])
    def test_monotone_in_distance(self, nu):
        h = np.sort(np.random.default_rng(0).uniform(0, 3000, 400))
        assert np.all(np.diff(matern_correlation(h, 200.0, nu)) <= 1e-15)

    def test_invalid(self):
        with pytest.raises(CovarianceDomainError):
            StationaryMaternParams(1.0, -1.0)
        with pytest.raises(CovarianceDomainError):
            matern(np.nan, StationaryMaternParams(1.0, 1.0))


class TestNonstationary:
    def test_worked_value(self):
        s, t = np.zeros(3), np.array([1.0, 0.0, 0.0])
        v = nonstationary_cov(s, t, LocalParams(1.0, 1.0, 0.0), LocalParams(1.0, 2.0, 0.0))
        ref = (4 / 5) ** 1.5 * math.exp(-1 / math.sqrt(2.5))
        assert v == pytest.approx(ref, rel=1e-14)
        # frozen from a 30-digit evaluation: 0.715541752... * 0.531285609...
        assert v == pytest.approx(0.380157035996384, rel=1e-13)

    def test_coincident(self):
        s = np.array([1.0, 2.0, 3.0])
        assert nonstationary_cov(s, s, LocalParams(2.0, 5.0, 0.4), LocalParams(2.0, 5.0, 0.4)) == 2.4

    def test_bad_range(self):
        with pytest.raises(CovarianceDomainError):
            LocalParams(1.0, 0.0, 0.1)

    @given(pos, pos)
    @settings(max_examples=300)
    def test_prefactor_bound(self, a, b):
        q = float(range_prefactor(a, b))
        assert 0 < q <= 1 + 1e-15
        if a == b:
            assert q == 1.0

    def test_prefactor_one_only_when_equal(self):
        assert range_prefactor(1.0, 1.0 + 1e-3) < 1.0

    def test_equal_field_reduction(self):
        rng = np.random.default_rng(3)
        ll = np.column_stack([rng.uniform(0, 30, 60), rng.uniform(-20, 20, 60)])
        fld_spec = KernelSpec("nonstationary_exponential",
                              field=type("F", (), {"evaluate": lambda self, x: (np.full(len(x), 1.7),
                                                                                 np.full(len(x), 321.0),
                                                                                 np.full(len(x), 0.2))})())
        stat = KernelSpec.stationary(1.7, 321.0, 0.2)
        np.testing.assert_allclose(cov_matrix(ll, ll, fld_spec), cov_matrix(ll, ll, stat), rtol=1e-12, atol=1e-14)

    def test_matrix_matches_entrywise_oracle(self):
        rng = np.random.default_rng(4)
        spec = ns_spec(rng)
        ll = np.column_stack([rng.uniform(-30, 30, 40), rng.uniform(-40, 40, 40)])
        sites = spec.sites(ll)
        ref = ns_exponential_loop(sites.xyz, sites.sigma**2, sites.beta, sites.tau2)
        np.testing.assert_allclose(cov_matrix(ll, ll, spec), ref, rtol=1e-12)

    def test_scalar_kernel_matches_matrix(self):
        rng = np.random.default_rng(5)
        spec = ns_spec(rng)
        ll = np.column_stack([rng.uniform(0, 10, 5), rng.uniform(0, 10, 5)])
        S = spec.sites(ll)
        C = cov_matrix(ll, ll, spec)
        for i in range(5):
            for j in range(5):
                pi = LocalParams(S.sigma[i] ** 2, S.beta[i], S.tau2[i])
                pj = LocalParams(S.sigma[j] ** 2, S.beta[j], S.tau2[j])
                assert nonstationary_cov(S.xyz[i], S.xyz[j], pi, pj) == pytest.approx(C[i, j], rel=1e-12)

    def test_general_nu_uses_bessel_form(self):
        rng = np.random.default_rng(6)
        base = ns_spec(rng)
        base.field.nu = 1.5
        spec = KernelSpec("nonstationary_matern", field=base.field)
        ll = np.column_stack([rng.uniform(0, 10, 6), rng.uniform(0, 10, 6)])
        S = spec.sites(ll)
        C = spec.latent(S, S)
        i, j = 1, 4
        d = np.linalg.norm(S.xyz[i] - S.xyz[j])
        be = math.sqrt(0.5 * (S.beta[i] ** 2 + S.beta[j] ** 2))
        q = range_prefactor(S.beta[i], S.beta[j])
        ref = S.sigma[i] * S.sigma[j] * q * matern_bessel(d, 1.0, be, 1.5)
        assert C[i, j] == pytest.approx(ref, rel=1e-10)

    def test_positive_definite_with_zero_jitter(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            spec = ns_spec(rng)
            ll = np.column_stack([rng.uniform(-40, 40, 50), rng.uniform(-50, 50, 50)])
            C = cov_matrix(ll, ll, spec)
            scipy.linalg.cholesky(C, lower=True)
            assert np.linalg.eigvalsh(C).min() >= -1e-8 * C.diagonal().max()

    def test_invalid_field_names_location(self):
        bad = type("F", (), {"evaluate": lambda self, x: (np.ones(len(x)), -np.ones(len(x)), np.ones(len(x)))})()
        spec = KernelSpec("nonstationary_exponential", field=bad)
        with pytest.raises(CovarianceDomainError, match="lon="):
            cov_matrix(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]]), spec)


class TestWendland:
    def test_values(self):
        assert wendland(0.0, 5.0) == 1.0
        assert wendland(5.0, 5.0) == 0.0
        assert wendland(2.5, 5.0) == pytest.approx(0.108073, abs=5e-7)
        assert wendland(7.0, 5.0) == 0.0

    def test_matches_polynomial_oracle(self):
        d = np.linspace(0, 12, 97)
        np.testing.assert_allclose(wendland(d, 10.0), [wendland_poly(x, 10.0) for x in d], rtol=1e-14)

    def test_smooth_at_support_edge(self):
        ell, h = 3.0, 1e-5
        left = (wendland(ell, ell) - wendland(ell - h, ell)) / h
        right = (wendland(ell + h, ell) - wendland(ell, ell)) / h
        assert abs(left - right) < 1e-6
        assert abs(wendland(ell - h, ell)) < 1e-6

    def test_range(self):
        d = np.random.default_rng(0).uniform(0, 20, 1000)
        w = wendland(d, 10.0)
        assert np.all((w >= 0) & (w <= 1))


class TestCovMatrix:
    def test_single_point(self):
        spec = KernelSpec.stationary(2.0, 100.0, 0.5)
        np.testing.assert_allclose(cov_matrix([[3.0, 4.0]], [[3.0, 4.0]], spec), [[2.5]])

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(8)
        spec = ns_spec(rng)
        a = np.column_stack([rng.uniform(0, 10, 7), rng.uniform(0, 10, 7)])
        b = np.column_stack([rng.uniform(0, 10, 5), rng.uniform(0, 10, 5)])
        np.testing.assert_array_equal(cov_matrix(a, b, spec), cov_matrix(b, a, spec).T)

    def test_nugget_only_on_exact_coincidence(self):
        spec = KernelSpec.stationary(1.0, 100.0, 0.5)
        a = np.array([[1.0, 1.0], [2.0, 2.0]])
        b = np.array([[1.0, 1.0], [2.0, 2.0 + 1e-12]])
        C = cov_matrix(a, b, spec)
        assert C[0, 0] == pytest.approx(1.5)
        assert C[1, 1] < 1.01

    def test_nugget_disabled(self):
        spec = KernelSpec.stationary(1.0, 100.0, 0.5, include_nugget=False)
        assert cov_matrix([[0.0, 0.0]], [[0.0, 0.0]], spec)[0, 0] == 1.0


class TestBackends:
    """The compiled kernels and the numpy fallback agree."""

    def setup_method(self):
        rng = np.random.default_rng(9)
        self.X = lonlat_to_xyz(rng.uniform(-50, 50, 80), rng.uniform(-50, 50, 80))
        self.Y = lonlat_to_xyz(rng.uniform(-50, 50, 60), rng.uniform(-50, 50, 60))
        self.sx, self.bx = rng.uniform(0.5, 2, 80), rng.uniform(50, 500, 80)
        self.sy, self.by = rng.uniform(0.5, 2, 60), rng.uniform(50, 500, 60)
        self.backends = _core.backends()

    def test_selected_backend_is_known(self):
        assert _core.BACKEND in ("cython", "python")

    def test_chordal(self):
        for mod in self.backends.values():
            ref = np.linalg.norm(self.X[:, None] - self.Y[None], axis=2)
            np.testing.assert_allclose(mod.chordal_matrix(self.X, self.Y), ref, rtol=1e-12, atol=1e-9)

    def test_nsexp(self):
        ref = _pykernels.nsexp_matrix(self.X, self.Y, self.sx, self.bx, self.sy, self.by)
        for mod in self.backends.values():
            np.testing.assert_allclose(mod.nsexp_matrix(self.X, self.Y, self.sx, self.bx, self.sy, self.by),
                                       ref, rtol=1e-13)

    def test_wendland(self):
        ref = _pykernels.wendland_matrix(self.X, self.Y, 3000.0)
        for mod in self.backends.values():
            np.testing.assert_allclose(mod.wendland_matrix(self.X, self.Y, 3000.0), ref, rtol=1e-13, atol=1e-15)

    def test_lasso(self):
        rng = np.random.default_rng(10)
        A = np.asfortranarray(rng.standard_normal((100, 20)))
        y = A[:, :3] @ np.array([1.0, -2.0, 0.5]) + 0.1 * rng.standard_normal(100)
        out = {}
        for name, mod in self.backends.items():
            w = np.zeros(20)
            mod.lasso_cd(A, y, 0.05, w, 1e-12, 100000)
            out[name] = w
        for w in out.values():
            np.testing.assert_allclose(w, out["python"], atol=1e-9)
        assert np.count_nonzero(out["python"]) < 20
