"""Stationary and nonstationary Matérn kernels on the sphere.

Kernels act on :class:`Sites`, which bundle the R^3 embedding of a set of
locations with the covariance parameters evaluated there, so parameter
fields are evaluated once per location rather than once per matrix entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field as dc_field
from typing import Callable

import numpy as np
from scipy import special

from . import _core
from .geo import EARTH_RADIUS_KM, lonlat_to_xyz, normalize_lon


class CovarianceDomainError(ValueError):
    pass


@dataclass(frozen=True)
class StationaryMaternParams:
    sigma2: float
    beta: float
    nu: float = 0.5
    tau2: float = 0.0

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.beta > 0 and self.nu > 0 and self.tau2 >= 0):
            raise CovarianceDomainError(f"invalid Matérn parameters {self}")


@dataclass(frozen=True)
class LocalParams:
    sigma2: float
    beta: float
    tau2: float
    nu: float = 0.5

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.beta > 0 and self.tau2 >= 0 and self.nu > 0):
            raise CovarianceDomainError(f"invalid local parameters {self}")


def matern_correlation(h, beta, nu):
    """Matérn correlation with argument sqrt(2 nu) h / beta; equals 1 at h=0."""
    h = np.asarray(h, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise CovarianceDomainError("non-finite distance")
    if nu == 0.5:
        return np.exp(-h / beta)
    if nu == 1.5:
        u = math.sqrt(3.0) * h / beta
        return (1.0 + u) * np.exp(-u)
    if nu == 2.5:
        u = math.sqrt(5.0) * h / beta
        return (1.0 + u + u * u / 3.0) * np.exp(-u)
    u = np.sqrt(2.0 * nu) * h / beta
    with np.errstate(divide="ignore", invalid="ignore"):
        logc = (nu * np.log(u) + np.log(special.kve(nu, u)) - u
                - special.gammaln(nu) - (nu - 1.0) * math.log(2.0))
        out = np.exp(logc)
    return np.where(u == 0, 1.0, np.nan_to_num(out, nan=0.0, posinf=0.0))


def matern(h, p: StationaryMaternParams, same_location=False):
    """Stationary Matérn covariance; adds the nugget on exact coincidence."""
    if not np.all(np.isfinite(h)) or np.any(np.asarray(h) < 0):
        raise CovarianceDomainError(f"invalid distance {h}")
    c = p.sigma2 * matern_correlation(h, p.beta, p.nu)
    return c + p.tau2 * np.asarray(same_location, dtype=np.float64)


def range_prefactor(beta_s, beta_t):
    """(2 b_s b_t / (b_s^2 + b_t^2))^{3/2}; lies in (0, 1]."""
    q = 2.0 * beta_s * beta_t / (beta_s * beta_s + beta_t * beta_t)
    return q * np.sqrt(q)


def nonstationary_cov(s, t, ps: LocalParams, pt: LocalParams):
    """Nonstationary Matérn covariance between two R^3 points.

    Coincident points (exact equality) return sigma2(s) + tau2(s).
    """
    if ps.beta <= 0 or pt.beta <= 0:
        raise CovarianceDomainError("range must be positive")
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.array_equal(s, t):
        return ps.sigma2 + ps.tau2
    d = float(np.linalg.norm(s - t))
    beff = math.sqrt(0.5 * (ps.beta**2 + pt.beta**2))
    pre = float(range_prefactor(ps.beta, pt.beta))
    return math.sqrt(ps.sigma2 * pt.sigma2) * pre * float(matern_correlation(d, beff, ps.nu))


def wendland(d, ell):
    """Compactly supported Wendland function with support length ``ell``."""
    u = np.asarray(d, dtype=np.float64) / ell
    v = np.clip(1.0 - u, 0.0, None)
    return v**6 * (35.0 * u * u + 18.0 * u + 3.0) / 3.0


@dataclass
class Sites:
    """Locations with embedded coordinates and local parameters."""

    lonlat: np.ndarray
    xyz: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray
    tau2: np.ndarray

    def __len__(self):
        return len(self.xyz)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Sites(self.lonlat[idx], self.xyz[idx], self.sigma[idx], self.beta[idx], self.tau2[idx])

    @staticmethod
    def concat(parts):
        parts = list(parts)
        if not parts:
            return Sites(np.empty((0, 2)), np.empty((0, 3)), np.empty(0), np.empty(0), np.empty(0))
        return Sites(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                       ("lonlat", "xyz", "sigma", "beta", "tau2")))


@dataclass
class CallableField:
    """Parameter field given by python callables of (lon, lat) arrays."""

    sigma2: Callable
    beta: Callable
    tau2: Callable
    nu: float = 0.5

    def evaluate(self, lonlat):
        lon, lat = lonlat[:, 0], lonlat[:, 1]
        ones = np.ones(len(lon))
        return (self.sigma2(lon, lat) * ones, self.beta(lon, lat) * ones, self.tau2(lon, lat) * ones)


KINDS = ("stationary_matern", "stationary_exponential", "nonstationary_exponential", "nonstationary_matern")


@dataclass
class KernelSpec:
    kind: str
    params: StationaryMaternParams | None = None
    field: object = None
    include_nugget: bool = True
    radius: float = EARTH_RADIUS_KM
    nu: float = dc_field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind.startswith("nonstationary"):
            if self.field is None:
                raise ValueError("nonstationary kernels need a parameter field")
            self.nu = 0.5 if self.kind == "nonstationary_exponential" else float(getattr(self.field, "nu", 0.5))
        else:
            if self.params is None:
                raise ValueError("stationary kernels need parameters")
            self.nu = 0.5 if self.kind == "stationary_exponential" else self.params.nu

    @classmethod
    def stationary(cls, sigma2, beta, tau2=0.0, nu=0.5, **kw):
        kind = "stationary_exponential" if nu == 0.5 else "stationary_matern"
        return cls(kind, params=StationaryMaternParams(sigma2, beta, nu, tau2), **kw)

    @property
    def stationary_kind(self):
        return self.kind.startswith("stationary")

    def sites(self, lonlat) -> Sites:
        lonlat = np.atleast_2d(np.asarray(lonlat, dtype=np.float64)).reshape(-1, 2)
        lonlat = np.column_stack([normalize_lon(lonlat[:, 0]), lonlat[:, 1]])
        xyz = lonlat_to_xyz(lonlat[:, 0], lonlat[:, 1], self.radius).reshape(-1, 3)
        n = len(lonlat)
        if self.stationary_kind:
            p = self.params
            s2, b, t2 = np.full(n, p.sigma2), np.full(n, p.beta), np.full(n, p.tau2)
        else:
            try:
                s2, b, t2 = self.field.evaluate(lonlat)
            except Exception as exc:
                raise CovarianceDomainError(f"parameter field evaluation failed: {exc}") from exc
            s2, b, t2 = (np.asarray(a, dtype=np.float64) for a in (s2, b, t2))
            bad = ~((s2 > 0) & (b > 0) & (t2 >= 0) & np.isfinite(s2 + b + t2))
            if np.any(bad):
                i = int(np.argmax(bad))
                raise CovarianceDomainError(
                    f"invalid parameters at lon={lonlat[i, 0]:.6g} lat={lonlat[i, 1]:.6g}: "
                    f"sigma2={s2[i]}, beta={b[i]}, tau2={t2[i]}")
        return Sites(lonlat, xyz, np.sqrt(s2), b, t2)

    def latent(self, a: Sites, b: Sites) -> np.ndarray:
        """Covariance of the latent (nugget-free) process between two site sets."""
        if len(a) == 0 or len(b) == 0:
            return np.zeros((len(a), len(b)))
        if self.kind == "stationary_exponential":
            d = _core.chordal_matrix(a.xyz, b.xyz)
            return self.params.sigma2 * np.exp(-d / self.params.beta)
        if self.kind == "stationary_matern":
            d = _core.chordal_matrix(a.xyz, b.xyz)
            return self.params.sigma2 * matern_correlation(d, self.params.beta, self.params.nu)
        if self.kind == "nonstationary_exponential":
            return _core.nsexp_matrix(a.xyz, b.xyz, a.sigma, a.beta, b.sigma, b.beta)
        d = _core.chordal_matrix(a.xyz, b.xyz)
        bs, bt = a.beta[:, None], b.beta[None, :]
        beff = np.sqrt(0.5 * (bs * bs + bt * bt))
        return (a.sigma[:, None] * b.sigma[None, :] * range_prefactor(bs, bt)
                * matern_correlation(d, beff, self.nu))

    def latent_diag(self, a: Sites) -> np.ndarray:
        return a.sigma * a.sigma

    def coincidence(self, a: Sites, b: Sites) -> np.ndarray:
        """Boolean matrix of exact lon/lat equality."""
        index = {}
        for j, key in enumerate(map(tuple, b.lonlat)):
            index.setdefault(key, []).append(j)
        out = np.zeros((len(a), len(b)), dtype=bool)
        for i, key in enumerate(map(tuple, a.lonlat)):
            for j in index.get(key, ()):
                out[i, j] = True
        return out


def cov_matrix(rows, cols, spec: KernelSpec) -> np.ndarray:
    """Dense covariance between two location sets (lon/lat arrays or Sites)."""
    same = rows is cols
    a = rows if isinstance(rows, Sites) else spec.sites(rows)
    b = a if same else (cols if isinstance(cols, Sites) else spec.sites(cols))
    C = spec.latent(a, b)
    if spec.include_nugget:
        if same:
            C[np.diag_indices_from(C)] += a.tau2
        else:
            hit = spec.coincidence(a, b)
            if hit.any():
                ii, jj = np.nonzero(hit)
                C[ii, jj] += a.tau2[ii]
    return C
