"""Gaussian predictive scoring, interval coverage and the gap-holdout experiment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ._parallel import pmap
from .data import Observations
from .geo import GeoBox, OceanMask, RasterMask

logger = logging.getLogger(__name__)

SCORE_HEADER = "replicate lon lat y yhat sd se logscore crps"
METRICS = ("mspe", "logscore", "crps")
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


class ScoreDomainError(ValueError):
    pass


class GapError(RuntimeError):
    pass


class OverlapError(ValueError):
    pass


def gaussian_scores(y, mean, sd):
    """Per-location (log-score, CRPS, squared error) of N(mean, sd^2) forecasts."""
    y, mean, sd = (np.asarray(a, dtype=np.float64) for a in (y, mean, sd))
    if np.any(~(sd > 0)):
        raise ScoreDomainError("predictive sd must be positive")
    e = y - mean
    z = e / sd
    logscore = 0.5 * (math.log(2.0 * math.pi) + z * z) + np.log(sd)
    crps = e * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * sd * stats.norm.pdf(z) - sd * _INV_SQRT_PI
    return logscore, crps, e * e


def coverage_curve(y, mean, sd, levels=(0.5, 0.8, 0.9, 0.95, 0.99)):
    """Fraction of ``y`` inside the central Gaussian interval at each nominal level."""
    y, mean, sd = (np.asarray(a, dtype=np.float64) for a in (y, mean, sd))
    if np.any(~(sd > 0)):
        raise ScoreDomainError("predictive sd must be positive")
    err = np.abs(y - mean)
    out = []
    for a in levels:
        hw = sd * stats.norm.ppf(0.5 * (1.0 + a))
        out.append(float(np.mean((err <= hw) & (hw > 0))) if len(y) else float("nan"))
    return np.array(out)


@dataclass
class ScoreReport:
    mspe: float
    logscore: float
    crps: float
    n: int
    table: dict = field(default_factory=dict, repr=False)  # column -> array

    @classmethod
    def from_predictions(cls, y, mean, sd, lonlat=None, replicate=0):
        ls, cr, se = gaussian_scores(y, mean, sd)
        n = len(ls)
        lonlat = np.full((n, 2), np.nan) if lonlat is None else np.asarray(lonlat).reshape(-1, 2)
        table = {"replicate": np.full(n, replicate), "lon": lonlat[:, 0], "lat": lonlat[:, 1],
                 "y": np.asarray(y, dtype=float), "yhat": np.asarray(mean, dtype=float),
                 "sd": np.asarray(sd, dtype=float), "se": se, "logscore": ls, "crps": cr}
        return cls(float(np.mean(se)), float(np.mean(ls)), float(np.mean(cr)), n, table)

    def metric(self, name):
        return getattr(self, name)


@dataclass
class GapExperimentConfig:
    gap_lon: float = 10.0
    gap_lat: float = 10.0
    min_obs: int = 50000
    test_size: int = 50000
    replicates: int = 100
    seed: int = 0
    raster_res: float = 1.0
    max_tries: int = 10000

    def __post_init__(self):
        if not (self.gap_lon > 0 and self.gap_lat > 0 and self.min_obs >= 0 and self.test_size > 0
                and self.replicates > 0 and self.max_tries > 0):
            raise ValueError(f"invalid gap experiment configuration {self}")


@dataclass
class Gap:
    replicate: int
    box: GeoBox
    train: np.ndarray
    test: np.ndarray


def check_disjoint(train, test):
    common = np.intersect1d(train, test)
    if len(common):
        raise OverlapError(f"{len(common)} test locations also appear in the training set")


def make_gaps(obs: Observations, mask: OceanMask | None, cfg: GapExperimentConfig, seed=None,
              domain: GeoBox | None = None):
    """Ocean-centred gap boxes with held-out test samples, one per replicate."""
    seed = cfg.seed if seed is None else seed
    domain = domain or GeoBox(-180.0, 180.0, -90.0, 90.0)
    raster = RasterMask.from_mask(mask or OceanMask.all_ocean(), cfg.raster_res, domain)
    cells = raster.cell_centers()
    if len(cells) == 0:
        raise GapError("no ocean cells in the experiment domain")
    if len(obs) <= cfg.min_obs:
        raise GapError(f"criterion unreachable: {len(obs)} observations cannot exceed min_obs={cfg.min_obs}")
    gaps = []
    for rep in range(cfg.replicates):
        rng = np.random.default_rng([seed, rep])
        for _ in range(cfg.max_tries):
            c = cells[rng.integers(len(cells))]
            lon = c[0] + (rng.random() - 0.5) * raster.res
            lat = c[1] + (rng.random() - 0.5) * raster.res
            box = GeoBox.centered(lon, lat, cfg.gap_lon / 2.0, cfg.gap_lat / 2.0)
            inside = box.contains(obs.lon, obs.lat)
            n_in = int(inside.sum())
            if n_in > cfg.min_obs:
                break
        else:
            raise GapError(f"replicate {rep}: no gap with more than {cfg.min_obs} observations "
                           f"after {cfg.max_tries} tries")
        idx_in = np.nonzero(inside)[0]
        test = np.sort(rng.choice(idx_in, min(cfg.test_size, n_in), replace=False))
        train = np.nonzero(~inside)[0]
        check_disjoint(train, test)
        gaps.append(Gap(rep, box, train, test))
    return gaps


@dataclass
class ExperimentResult:
    reports: dict  # model -> list of ScoreReport or None per replicate
    failures: dict  # model -> {replicate: message}
    summary: dict


def summarize(reports):
    names = list(reports)
    out = {"models": {}, "successes": {}}
    for name in names:
        ok = [r for r in reports[name] if r is not None]
        out["successes"][name] = len(ok)
        out["models"][name] = {m: float(np.mean([r.metric(m) for r in ok])) if ok else float("nan")
                               for m in METRICS}
    if "stationary" in reports and "nonstationary" in reports:
        better = {m: 0 for m in METRICS}
        for rs, rn in zip(reports["stationary"], reports["nonstationary"]):
            if rs is None or rn is None:
                continue
            for m in METRICS:
                better[m] += int(rn.metric(m) < rs.metric(m))
        out["nonstationary_better"] = better
    return out


def run_gap_experiment(obs: Observations, pipelines: dict, cfg: GapExperimentConfig, mask=None, gaps=None,
                       domain=None, n_jobs=1) -> ExperimentResult:
    """Score each pipeline on every gap replicate.

    ``pipelines`` maps a model name to a callable
    ``(train: Observations, test_lonlat) -> (mean, sd)`` returning predictive
    distributions for held-out observations (see :class:`MRAPipeline`).
    """
    gaps = gaps if gaps is not None else make_gaps(obs, mask, cfg, domain=domain)

    def run(gap):
        check_disjoint(gap.train, gap.test)
        train = obs.take(gap.train)
        test = obs.take(gap.test)
        res = {}
        for name, pipe in pipelines.items():
            try:
                mean, sd = pipe(train, test.lonlat)
                target = pipe.score_target(test, mean, sd)[0] if hasattr(pipe, "score_target") else test.value
                res[name] = ScoreReport.from_predictions(target, mean, sd, lonlat=test.lonlat,
                                                         replicate=gap.replicate)
            except Exception as exc:  # noqa: BLE001 - recorded per replicate
                logger.warning("replicate %d, model %s failed: %s", gap.replicate, name, exc)
                res[name] = exc
        return res

    per_rep = pmap(run, gaps, n_jobs)
    reports = {name: [] for name in pipelines}
    failures = {name: {} for name in pipelines}
    for gap, res in zip(gaps, per_rep):
        for name in pipelines:
            r = res[name]
            if isinstance(r, Exception):
                reports[name].append(None)
                failures[name][gap.replicate] = str(r)
            else:
                reports[name].append(r)
    return ExperimentResult(reports, failures, summarize(reports))


class MRAPipeline:
    """Detrend, build the M-RA prior on training data, predict held-out observations.

    Scores are computed on the residual scale: the trend is subtracted from
    both the held-out values and nothing is added to the predictions.
    """

    def __init__(self, kernel, tree, trend=None, n_nodes=1, n_jobs=1):
        self.kernel = kernel
        self.tree = tree  # RegionTree or callable(train lonlat) -> RegionTree
        self.trend = trend
        self.n_nodes = n_nodes
        self.n_jobs = n_jobs

    def _resid(self, obs: Observations):
        if self.trend is None:
            return obs.value
        return obs.value - self.trend.predict(obs.lat)

    def __call__(self, train: Observations, test_lonlat):
        from . import mra
        from .dist import make_plan, run_distributed_posterior, run_distributed_predict

        tree = self.tree(train.lonlat) if callable(self.tree) else self.tree
        prior = mra.build_prior(tree, self.kernel, train.lonlat, n_jobs=self.n_jobs)
        y = self._resid(train)
        if self.n_nodes > 1:
            dpost = run_distributed_posterior(prior, y, make_plan(tree, self.n_nodes), n_jobs=self.n_jobs)
            pf = run_distributed_predict(dpost, test_lonlat, include_nugget=True, n_jobs=self.n_jobs)
        else:
            state = mra.posterior_pass(prior, y, n_jobs=self.n_jobs)
            pf = mra.predict(state, test_lonlat, include_nugget=True, n_jobs=self.n_jobs)
        if pf.errors:
            raise ValueError(f"{len(pf.errors)} test locations fall outside the region tree")
        return pf.mean, pf.sd

    def score_target(self, test: Observations, mean, sd):
        return self._resid(test), mean, sd


def _fmt(v):
    return f"{v:.10g}"


def write_scores(path, reports):
    """Columnar per-location scores for a list of ScoreReports (None entries skipped)."""
    cols = SCORE_HEADER.split()
    with open(path, "w") as fh:
        fh.write(SCORE_HEADER + "\n")
        for rep in reports:
            if rep is None:
                continue
            t = rep.table
            for i in range(rep.n):
                fh.write(" ".join(str(int(t[c][i])) if c == "replicate" else _fmt(t[c][i]) for c in cols) + "\n")


def write_summary(path, summary):
    lines = ["model MSPE log-score CRPS successes"]
    for name, vals in summary["models"].items():
        lines.append(f"{name} " + " ".join(_fmt(vals[m]) for m in METRICS) + f" {summary['successes'][name]}")
    if "nonstationary_better" in summary:
        b = summary["nonstationary_better"]
        lines.append("#gaps_nonstationary_better " + " ".join(str(b[m]) for m in METRICS))
    Path(path).write_text("\n".join(lines) + "\n")
