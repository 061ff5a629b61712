"""Latitudinal mean structure: binned means and cubic B-spline regression."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

from ._parallel import pmap

FORMAT_TAG = "nsmra-trend"
FORMAT_VERSION = 1


class TrendError(ValueError):
    pass


@dataclass
class LatBinSummary:
    edges: np.ndarray
    means: np.ndarray  # nan where empty
    counts: np.ndarray
    lat_means: np.ndarray | None = None  # mean latitude of the members of each bin

    @property
    def abscissae(self):
        """Latitude each bin mean is attributed to in the regression."""
        return self.centers if self.lat_means is None else np.where(self.nonempty, self.lat_means, self.centers)

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def nonempty(self):
        return self.counts > 0


def bin_by_latitude(lat, value, n_bins=180) -> LatBinSummary:
    """Arithmetic mean of ``value`` in ``n_bins`` equal latitude bins over [-90, 90]."""
    if n_bins < 2:
        raise TrendError("n_bins must be >= 2")
    lat = np.asarray(lat, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    if len(lat) == 0:
        raise TrendError("no observations to bin")
    edges = np.linspace(-90.0, 90.0, n_bins + 1)
    idx = np.clip(np.floor((lat + 90.0) / 180.0 * n_bins).astype(int), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=value, minlength=n_bins)
    lsums = np.bincount(idx, weights=lat, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        lat_means = np.where(counts > 0, lsums / np.maximum(counts, 1), np.nan)
    return LatBinSummary(edges, means, counts, lat_means)


def spline_basis(x, breaks):
    """Cubic B-spline design matrix with ``len(breaks) + 2`` columns.

    ``breaks`` are the equally spaced boundary and interior knots; the
    boundary knots are repeated to order 4. ``x`` is clamped into the
    knot span, so the fitted curve is flat beyond the data range.
    """
    breaks = np.asarray(breaks, dtype=np.float64)
    x = np.clip(np.asarray(x, dtype=np.float64), breaks[0], breaks[-1])
    t = np.r_[[breaks[0]] * 3, breaks, [breaks[-1]] * 3]
    return BSpline.design_matrix(x, t, 3).toarray()


@dataclass
class TrendModel:
    k: int
    knots: np.ndarray  # breakpoints in degrees, k - 2 of them
    coef: np.ndarray
    cv_table: dict = field(default_factory=dict)

    def _scale(self, lat):
        lo, hi = self.knots[0], self.knots[-1]
        return (np.asarray(lat, dtype=np.float64) - lo) / (hi - lo)

    def predict(self, lat):
        B = spline_basis(self._scale(lat), self._scale(self.knots))
        return B @ self.coef

    def save(self, path):
        lines = [f"{FORMAT_TAG} {FORMAT_VERSION}", f"k {self.k}",
                 "knots " + " ".join(f"{v:.17g}" for v in self.knots),
                 "coef " + " ".join(f"{v:.17g}" for v in self.coef)]
        for kk in sorted(self.cv_table):
            lines.append(f"cv {kk} {self.cv_table[kk]['mse']:.17g} {self.cv_table[kk]['fallbacks']}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        tag, ver = lines[0].split()
        if tag != FORMAT_TAG or int(ver) != FORMAT_VERSION:
            raise TrendError(f"{path}: not a version-{FORMAT_VERSION} trend file")
        fields = {}
        cv = {}
        for line in lines[1:]:
            key, *rest = line.split()
            if key == "cv":
                cv[int(rest[0])] = {"mse": float(rest[1]), "fallbacks": int(rest[2])}
            else:
                fields[key] = rest
        return cls(int(fields["k"][0]), np.array(fields["knots"], dtype=float),
                   np.array(fields["coef"], dtype=float), cv)


def fit_trend(bins: LatBinSummary, k: int, span=None) -> TrendModel:
    """Unweighted least squares of nonempty bin means on a k-column cubic B-spline basis.

    Each mean is placed at the mean latitude of its members, so data linear
    in latitude give exactly linear bin summaries. ``span`` fixes the
    knot range (default: range of the nonempty bins).
    """
    x = bins.abscissae[bins.nonempty]
    y = bins.means[bins.nonempty]
    if k < 4:
        raise TrendError("k must be >= 4 for a cubic basis")
    if len(x) < k:
        raise TrendError(f"{len(x)} nonempty bins cannot support k={k}")
    lo, hi = (x.min(), x.max()) if span is None else span
    if hi <= lo:
        raise TrendError("all bins at one latitude; spline design is rank-deficient")
    knots = np.linspace(lo, hi, k - 2)
    model = TrendModel(k, knots, np.zeros(k))
    B = spline_basis(model._scale(x), model._scale(knots))
    _, R, piv = scipy.linalg.qr(B, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * max(B.shape) * np.finfo(float).eps * 10))
    if rank < k:
        raise TrendError(f"rank-deficient spline design; deficient basis columns {sorted(piv[rank:].tolist())}")
    model.coef = np.linalg.lstsq(B, y, rcond=None)[0]
    return model


def _canonical_order(lat, value):
    return np.lexsort((value, lat))


def select_k_cv(lat, value, k_range=range(5, 16), folds=10, seed=0, n_bins=180, n_jobs=1):
    """Choose the number of spline basis functions by k-fold CV of held-out values.

    Returns ``(k_best, table)``; table maps k to ``{"mse", "fallbacks"}``
    where fallbacks counts held-out points whose latitude bin was empty in
    training and were predicted at the nearest nonempty bin centre.
    """
    lat = np.asarray(lat, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    if len(lat) < folds:
        raise TrendError(f"need at least {folds} observations for {folds}-fold CV")
    order = _canonical_order(lat, value)
    lat, value = lat[order], value[order]
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(lat), dtype=int)
    fold_of[rng.permutation(len(lat))] = np.arange(len(lat)) % folds
    edges = np.linspace(-90.0, 90.0, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    bin_idx = np.clip(np.floor((lat + 90.0) / 180.0 * n_bins).astype(int), 0, n_bins - 1)
    full = bin_by_latitude(lat, value, n_bins).abscissae[np.bincount(bin_idx, minlength=n_bins) > 0]
    span = (full.min(), full.max())  # every fold shares the knots of the full data

    def run_fold(f):
        tr, te = fold_of != f, fold_of == f
        bins = bin_by_latitude(lat[tr], value[tr], n_bins)
        ne = np.nonzero(bins.nonempty)[0]
        tb = bin_idx[te]
        empty = ~bins.nonempty[tb]
        pred_lat = lat[te].copy()
        if empty.any():
            nearest = ne[np.argmin(np.abs(ne[None, :] - tb[empty][:, None]), axis=1)]
            pred_lat[empty] = centers[nearest]
        res = {}
        for k in k_range:
            try:
                model = fit_trend(bins, k, span)
            except TrendError:
                res[k] = (np.inf, int(empty.sum()))
                continue
            err = value[te] - model.predict(pred_lat)
            res[k] = (float(np.sum(err * err)), int(empty.sum()))
        return res

    per_fold = pmap(run_fold, range(folds), n_jobs)
    table = {}
    for k in k_range:
        sse = sum(r[k][0] for r in per_fold)
        table[k] = {"mse": sse / len(lat), "fallbacks": sum(r[k][1] for r in per_fold)}
    best = min(v["mse"] for v in table.values())
    tol = 1e-12 * max(1.0, abs(best))
    k_best = min(k for k, v in table.items() if v["mse"] <= best + tol)
    return k_best, table


def detrend(lat, value, model: TrendModel):
    return np.asarray(value, dtype=np.float64) - model.predict(lat)


def retrend(lat, resid, model: TrendModel):
    return np.asarray(resid, dtype=np.float64) + model.predict(lat)
