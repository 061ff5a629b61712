"""Local stationary Matérn fits on a lattice and their smoothing into a parameter field.

Pipeline: :func:`local_estimate_grid` fits a stationary Matérn at each ocean
grid point from a short-range sample (box B1) and a long-range sample (B2
minus B1); :func:`smooth_field` regresses the log estimates on Wendland
features with a Lasso penalty; :class:`ParamField` evaluates the result
anywhere on the sphere.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize

from . import _core
from ._parallel import pmap
from .covariance import LocalParams, matern_correlation
from .geo import EARTH_RADIUS_KM, GeoBox, LonLat, lonlat_to_xyz, make_grid

logger = logging.getLogger(__name__)

PARAMS = ("sigma2", "beta", "tau2")
FIELD_TAG = "nsmra-paramfield"
FIELD_VERSION = 1
TABLE_HEADER = "lon lat sigma2 beta nu tau2 loglik n_short n_long status"


class DuplicateLocationError(ValueError):
    pass


@dataclass(frozen=True)
class LocalFitConfig:
    grid_step: float = 2.0
    b1_half: float = 2.0
    b2_half: float = 20.0
    n_short: int = 800
    n_long: int = 100
    min_obs_b1: int = 800
    seed: int = 0
    fixed_nu: float | None = 0.5
    restarts: int = 3
    min_sample: int = 30

    def __post_init__(self):
        if not self.b2_half > self.b1_half > 0:
            raise ValueError("B2 must strictly contain B1")
        if self.n_short <= 0 or self.n_long <= 0:
            raise ValueError("N_s and N_b must be positive")
        if self.min_obs_b1 < 1:
            raise ValueError("min_obs_b1 must be >= 1")


@dataclass
class LocalEstimate:
    lon: float
    lat: float
    sigma2: float = math.nan
    beta: float = math.nan
    nu: float = math.nan
    tau2: float = math.nan
    loglik: float = math.nan
    n_short: int = 0
    n_long: int = 0
    status: str = "ok"

    @property
    def usable(self):
        return self.status == "ok"


def sample_local_design(center: LonLat, lon, lat, cfg: LocalFitConfig, seed):
    """Indices of the short-range and long-range samples around ``center``.

    Returns ``(short, long, status)``; status is ``"skipped"`` when B1 holds
    fewer than ``cfg.min_obs_b1`` observations.
    """
    b1 = GeoBox.centered(center.lon, center.lat, cfg.b1_half)
    b2 = GeoBox.centered(center.lon, center.lat, cfg.b2_half)
    in1 = b1.contains(lon, lat)
    in2 = b2.contains(lon, lat) & ~in1
    idx1 = np.nonzero(in1)[0]
    idx2 = np.nonzero(in2)[0]
    if len(idx1) < cfg.min_obs_b1:
        return idx1[:0], idx2[:0], "skipped"
    rng = np.random.default_rng(seed)
    short = idx1 if len(idx1) <= cfg.n_short else np.sort(rng.choice(idx1, cfg.n_short, replace=False))
    long_ = idx2 if len(idx2) <= cfg.n_long else np.sort(rng.choice(idx2, cfg.n_long, replace=False))
    return short, long_, "ok"


def _profile_nll(D, y, beta, g, nu):
    """Negative log-likelihood with the partial sill profiled out.

    Covariance is sigma2 * (R(beta, nu) + g I); returns (nll, sigma2_hat).
    """
    n = len(y)
    K = matern_correlation(D, beta, nu)
    K[np.diag_indices(n)] += g
    try:
        L = scipy.linalg.cholesky(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return np.inf, np.nan
    z = scipy.linalg.solve_triangular(L, y, lower=True, check_finite=False)
    s2 = float(z @ z) / n
    if not s2 > 0:
        return np.inf, np.nan
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return 0.5 * (n * math.log(2 * math.pi * s2) + logdet + n), s2


def fit_local_matern(lonlat, y, fixed_nu=0.5, restarts=3, seed=0, radius=EARTH_RADIUS_KM,
                     beta0=None, min_sample=30, lon0=math.nan, lat0=math.nan) -> LocalEstimate:
    """Maximum likelihood fit of a zero-mean stationary Matérn with nugget.

    Searches log(beta), log(tau2/sigma2) and optionally log(nu) with
    Nelder-Mead from ``restarts`` starting points (the first deterministic);
    the partial sill is profiled out exactly.
    """
    lonlat = np.asarray(lonlat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < min_sample:
        raise ValueError(f"local sample of {n} < minimum {min_sample}")
    if len(np.unique(lonlat, axis=0)) < n:
        raise DuplicateLocationError("duplicated locations in local sample")
    xyz = lonlat_to_xyz(lonlat[:, 0], lonlat[:, 1], radius)
    D = _core.chordal_matrix(xyz, xyz)
    if beta0 is None:
        lo, hi = lonlat.min(axis=0), lonlat.max(axis=0)
        diag = np.linalg.norm(lonlat_to_xyz(lo[0], lo[1], radius) - lonlat_to_xyz(hi[0], hi[1], radius))
        beta0 = max(diag / 5.0, 1e-3)
    dmax = max(float(D.max()), 1e-6)
    free_nu = fixed_nu is None
    # total variance split 80/20 between sill and nugget
    x0 = [math.log(beta0), math.log(0.25)] + ([math.log(0.5)] if free_nu else [])
    lb = np.array([math.log(dmax * 1e-4), math.log(1e-6)] + ([math.log(0.05)] if free_nu else []))
    ub = np.array([math.log(dmax * 1e2), math.log(1e4)] + ([math.log(5.0)] if free_nu else []))

    def obj(theta):
        if np.any(theta < lb) or np.any(theta > ub):
            return 1e300
        nu = math.exp(theta[2]) if free_nu else fixed_nu
        val, _ = _profile_nll(D, y, math.exp(theta[0]), math.exp(theta[1]), nu)
        return val if np.isfinite(val) else 1e300

    rng = np.random.default_rng(seed)
    starts = [np.array(x0)]
    for _ in range(max(restarts, 1) - 1):
        starts.append(np.clip(np.array(x0) + rng.uniform(-1.0, 1.0, len(x0)), lb + 1e-9, ub - 1e-9))
    best, converged = None, False
    for s in starts:
        res = scipy.optimize.minimize(obj, s, method="Nelder-Mead",
                                      options={"xatol": 1e-4, "fatol": 1e-7, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
        converged |= bool(res.success)
    theta = best.x
    nu = math.exp(theta[2]) if free_nu else fixed_nu
    beta, g = math.exp(theta[0]), math.exp(theta[1])
    nll, s2 = _profile_nll(D, y, beta, g, nu)
    status = "ok" if converged and np.isfinite(nll) else "failed"
    return LocalEstimate(lon0, lat0, s2, beta, nu, g * s2, -nll, n, 0, status)


def _fit_point(args):
    k, pt, lon, lat, val, cfg, radius = args
    center = LonLat(float(pt[0]), float(pt[1]))
    seed = np.random.SeedSequence([cfg.seed, k])
    s_design, s_fit = seed.spawn(2)
    short, long_, status = sample_local_design(center, lon, lat, cfg, s_design)
    if status != "ok" or len(short) + len(long_) < cfg.min_sample:
        return LocalEstimate(center.lon, center.lat, n_short=len(short), n_long=len(long_), status="skipped")
    idx = np.concatenate([short, long_])
    ll = np.column_stack([lon[idx], lat[idx]])
    try:
        est = fit_local_matern(ll, val[idx], cfg.fixed_nu, cfg.restarts, s_fit, radius,
                               min_sample=cfg.min_sample, lon0=center.lon, lat0=center.lat)
    except DuplicateLocationError:
        return LocalEstimate(center.lon, center.lat, n_short=len(short), n_long=len(long_), status="failed")
    est.n_short, est.n_long = len(short), len(long_)
    return est


def local_estimate_grid(obs, cfg: LocalFitConfig, mask=None, box: GeoBox | None = None,
                        radius=EARTH_RADIUS_KM, n_jobs=1, grid=None):
    """One :class:`LocalEstimate` per ocean grid point, in grid order."""
    box = box or GeoBox(-180.0, 180.0, -60.0, 60.0)
    pts = make_grid(box, cfg.grid_step, mask) if grid is None else np.asarray(grid, dtype=float)
    lon, lat, val = obs.lon, obs.lat, obs.value
    jobs = [(k, pts[k], lon, lat, val, cfg, radius) for k in range(len(pts))]
    return pmap(_fit_point, jobs, n_jobs)


def smoothness_summary(estimates):
    """Distribution of free-smoothness local estimates (usable points only)."""
    nu = np.array([e.nu for e in estimates if e.usable])
    if len(nu) == 0:
        return {"count": 0}
    q = np.quantile(nu, [0.1, 0.25, 0.5, 0.75, 0.9])
    return {"count": int(len(nu)), "mean": float(nu.mean()), "q10": q[0], "q25": q[1],
            "median": q[2], "q75": q[3], "q90": q[4]}


def write_estimates(path, estimates):
    with open(path, "w") as fh:
        fh.write(TABLE_HEADER + "\n")
        for e in estimates:
            fh.write(f"{e.lon:.17g} {e.lat:.17g} {e.sigma2:.17g} {e.beta:.17g} {e.nu:.17g} "
                     f"{e.tau2:.17g} {e.loglik:.17g} {e.n_short} {e.n_long} {e.status}\n")


def read_estimates(path):
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("lon "):
            continue
        p = line.split()
        if len(p) != 10:
            raise ValueError(f"{path}:{lineno}: expected 10 columns")
        out.append(LocalEstimate(*map(float, p[:7]), int(p[7]), int(p[8]), p[9]))
    return out


# ---------------------------------------------------------------- smoothing


@dataclass
class ParamField:
    """exp(intercept + sum_j coef_j * WL(s; center_j)) for sigma2, beta and tau2."""

    centers: np.ndarray  # (N_w, 2) lon/lat
    ell: float  # km
    intercepts: dict
    coefs: dict
    nu: float = 0.5
    radius: float = EARTH_RADIUS_KM
    _cxyz: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self._cxyz = (lonlat_to_xyz(self.centers[:, 0], self.centers[:, 1], self.radius)
                      if len(self.centers) else np.empty((0, 3)))
        for p in PARAMS:
            self.coefs[p] = np.asarray(self.coefs.get(p, np.zeros(len(self.centers))), dtype=np.float64)

    def features(self, lonlat):
        lonlat = np.atleast_2d(np.asarray(lonlat, dtype=np.float64))
        xyz = lonlat_to_xyz(lonlat[:, 0], lonlat[:, 1], self.radius)
        if len(self.centers) == 0:
            return np.zeros((len(lonlat), 0))
        return _core.wendland_matrix(xyz, self._cxyz, self.ell)

    def log_values(self, lonlat):
        W = self.features(lonlat)
        return {p: self.intercepts[p] + W @ self.coefs[p] for p in PARAMS}

    def evaluate(self, lonlat):
        lv = self.log_values(lonlat)
        return tuple(np.exp(lv[p]) for p in PARAMS)

    def nonzero_counts(self):
        return {p: int(np.count_nonzero(self.coefs[p])) for p in PARAMS}

    def save(self, path):
        lines = [f"{FIELD_TAG} {FIELD_VERSION}", f"nu {self.nu:.17g}", f"ell {self.ell:.17g}",
                 f"radius {self.radius:.17g}", f"centers {len(self.centers)}"]
        lines += [f"{lo:.17g} {la:.17g}" for lo, la in self.centers]
        for p in PARAMS:
            nz = np.nonzero(self.coefs[p])[0]
            lines.append(f"param {p} {self.intercepts[p]:.17g} {len(nz)}")
            lines += [f"{j} {self.coefs[p][j]:.17g}" for j in nz]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        it = iter(Path(path).read_text().splitlines())
        tag, ver = next(it).split()
        if tag != FIELD_TAG or int(ver) != FIELD_VERSION:
            raise ValueError(f"{path}: not a version-{FIELD_VERSION} parameter field")
        nu = float(next(it).split()[1])
        ell = float(next(it).split()[1])
        radius = float(next(it).split()[1])
        nc = int(next(it).split()[1])
        centers = np.array([list(map(float, next(it).split())) for _ in range(nc)]).reshape(-1, 2)
        inter, coefs = {}, {}
        for _ in PARAMS:
            _, p, b0, nnz = next(it).split()
            inter[p] = float(b0)
            c = np.zeros(nc)
            for _ in range(int(nnz)):
                j, v = next(it).split()
                c[int(j)] = float(v)
            coefs[p] = c
        return cls(centers, ell, inter, coefs, nu, radius)


def eval_theta(fld: ParamField, s: LonLat) -> LocalParams:
    s2, b, t2 = fld.evaluate(np.array([[s.lon, s.lat]]))
    return LocalParams(float(s2[0]), float(b[0]), float(t2[0]), fld.nu)


def _standardize(W):
    mean = W.mean(axis=0)
    sd = W.std(axis=0)
    active = sd > 1e-12
    Z = np.zeros_like(W)
    Z[:, active] = (W[:, active] - mean[active]) / sd[active]
    return Z, mean, np.where(active, sd, 1.0), active


def lasso_fit(W, y, lam, tol=1e-8, max_iter=100000, w0=None):
    """Lasso with standardized features: min 1/(2n)||y - b0 - W c||^2 + lam ||c_std||_1.

    Returns ``(intercept, coef)`` on the original feature scale.
    """
    y = np.asarray(y, dtype=np.float64)
    if W.shape[1] == 0:
        return float(y.mean()), np.zeros(0)
    Z, mean, sd, active = _standardize(W)
    ybar = float(y.mean())
    w = np.zeros(W.shape[1]) if w0 is None else np.array(w0, dtype=np.float64)
    _core.lasso_cd(Z, y - ybar, lam, w, tol, max_iter)
    w[~active] = 0.0
    coef = w / sd
    return ybar - float(mean @ coef), coef


def _stack(estimates):
    use = [e for e in estimates if e.usable and all(getattr(e, p) > 0 for p in PARAMS)]
    if not use:
        raise ValueError("no usable local estimates")
    ll = np.array([[e.lon, e.lat] for e in use])
    logs = {p: np.log(np.array([getattr(e, p) for e in use])) for p in PARAMS}
    return ll, logs


def smooth_field(estimates, centers, ell, lasso_lambda, nu=0.5, radius=EARTH_RADIUS_KM) -> ParamField:
    """Lasso regression of stacked log estimates on Wendland features.

    ``lasso_lambda`` is a scalar or a mapping per parameter name.
    """
    ll, logs = _stack(estimates)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        raise ValueError("need at least one Wendland centre")
    fld = ParamField(centers, ell, {p: 0.0 for p in PARAMS}, {}, nu, radius)
    W = fld.features(ll)
    lams = lasso_lambda if isinstance(lasso_lambda, dict) else {p: lasso_lambda for p in PARAMS}
    for p in PARAMS:
        b0, c = lasso_fit(W, logs[p], lams[p])
        fld.intercepts[p], fld.coefs[p] = b0, c
        if not np.any(c):
            warnings.warn(f"lasso penalty removed every {p} coefficient; field is constant",
                          RuntimeWarning, stacklevel=2)
    return fld


def _fold_ids(ll, folds, seed):
    """Folds over distinct grid locations so stacked days stay together."""
    uniq, inv = np.unique(ll, axis=0, return_inverse=True)
    rng = np.random.default_rng(seed)
    fold_of_loc = np.empty(len(uniq), dtype=int)
    fold_of_loc[rng.permutation(len(uniq))] = np.arange(len(uniq)) % folds
    return fold_of_loc[inv.ravel()]


def select_smoothing_cv(estimates, center_sets, ells, lambdas, folds=10, seed=0, radius=EARTH_RADIUS_KM,
                        n_jobs=1):
    """Cross-validate (centre set, support length, penalty) on the log scale.

    ``center_sets`` maps a label (e.g. the target spacing) to an (N_w, 2)
    lon/lat array. The score is the MSPE summed over the three log
    parameters. Returns ``(best, table)`` with ``best = (label, ell, lam)``
    and ``table[(label, ell, lam)] = mspe``.
    """
    ll, logs = _stack(estimates)
    nloc = len(np.unique(ll, axis=0))
    if nloc < folds:
        raise ValueError(f"{nloc} usable grid points < {folds} folds")
    fold_of = _fold_ids(ll, folds, seed)
    lambdas = sorted(lambdas, reverse=True)
    combos = [(label, ell) for label in center_sets for ell in ells]

    def run(combo):
        label, ell = combo
        fld = ParamField(center_sets[label], ell, {p: 0.0 for p in PARAMS}, {}, 0.5, radius)
        W = fld.features(ll)
        sse = {lam: 0.0 for lam in lambdas}
        for f in range(folds):
            tr, te = fold_of != f, fold_of == f
            Z, mean, sd, active = _standardize(W[tr])
            for p in PARAMS:
                w_prev = None
                ybar = logs[p][tr].mean()
                for lam in lambdas:
                    w = np.zeros(W.shape[1]) if w_prev is None else w_prev.copy()
                    _core.lasso_cd(Z, logs[p][tr] - ybar, lam, w, 1e-8, 100000)
                    w[~active] = 0.0
                    w_prev = w
                    coef = w / sd
                    pred = ybar - mean @ coef + W[te] @ coef
                    sse[lam] += float(np.sum((logs[p][te] - pred) ** 2))
        return {(label, ell, lam): sse[lam] / len(ll) for lam in lambdas}

    table = {}
    for part in pmap(run, combos, n_jobs):
        table.update(part)
    best_val = min(table.values())
    best = next(k for k in sorted(table, key=lambda k: (table[k], k[1], -k[2])) if table[k] <= best_val)
    return best, table
