"""Command-line orchestration of the pipeline.

Every subcommand reads one YAML config and checks all of its inputs before
writing anything. Outputs land in ``paths.workdir`` next to a JSON run
manifest. Exit codes: 0 success, 2 validation failure,
3 numerical failure, 4 transport failure.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np
import scipy
import yaml

from . import __version__, _core, mra
from .covariance import KernelSpec
from .data import ingest, read_any
from .dist import make_plan, node_posterior, node_predict, run_distributed_posterior, run_distributed_predict
from .dist.transport import SocketTransport, TransportError
from .dist.wire import ChecksumError, FrameError
from .evalx import (GapExperimentConfig, MRAPipeline, ScoreReport, coverage_curve, run_gap_experiment,
                    summarize, write_scores, write_summary)
from .geo import GeoBox, OceanMask, icosahedral_centers
from .paramfield import (LocalFitConfig, ParamField, local_estimate_grid, read_estimates, select_smoothing_cv,
                         smooth_field, write_estimates)
from .partition import auto_split, load_coarse_partition, read_tree, single_region_tree, validate_tree
from .product import GridMeta, export_grid
from .trend import TrendModel, bin_by_latitude, fit_trend, select_k_cv

logger = logging.getLogger("nsmra")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_TRANSPORT = 0, 2, 3, 4

DEFAULTS = {
    "paths": {"mask": None, "partition": None, "test": None},
    "study_box": [-180.0, 180.0, -60.0, 60.0],
    "quality_min": 2,
    "seed": 0,
    "n_jobs": 1,
    "trend": {"k_min": 5, "k_max": 15, "folds": 10, "n_bins": 180},
    "local": {"grid_step": 2.0, "b1_half": 2.0, "b2_half": 20.0, "n_short": 800, "n_long": 100,
              "min_obs_b1": 800, "fixed_nu": 0.5, "restarts": 3},
    "smoothing": {"spacings_km": [200.0, 400.0, 800.0], "ells_km": [500.0, 1000.0, 2000.0],
                  "lambdas": [0.1, 0.03, 0.01, 0.003, 0.001], "folds": 10},
    "kernel": {"kind": "nonstationary_exponential"},
    "tree": {"M": None, "r": 49, "threshold": 2000},
    "stationary": {"init": [1.0, 500.0, 0.1], "nu": 0.5, "fit_nu": False, "max_n": 4000, "maxiter": 400},
    "plan": {"n_nodes": 1, "transport": "loopback", "addresses": [], "timeout": 120.0},
    "predict": {"box": None, "step": 1.0, "add_trend": False, "text": False},
    "experiment": {"gap_lon": 10.0, "gap_lat": 10.0, "min_obs": 50000, "test_size": 50000,
                   "replicates": 100, "models": ["stationary", "nonstationary"]},
}

STAGE_FILES = {
    "trend": "trend.txt", "local": "local_estimates.txt", "field": "paramfield.txt",
    "tree": "tree.txt", "stationary": "stationary.txt",
}


class ConfigError(ValueError):
    pass


class Config:
    """YAML config with defaults; ``get`` raises on keys missing from both."""

    def __init__(self, raw, path):
        self.raw = raw or {}
        self.path = Path(path)
        self.base = self.path.parent

    def _lookup(self, tree, dotted):
        node = tree
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise KeyError(dotted)
            node = node[part]
        return node

    def get(self, dotted):
        try:
            return self._lookup(self.raw, dotted)
        except KeyError:
            pass
        try:
            return self._lookup(DEFAULTS, dotted)
        except KeyError:
            raise ConfigError(f"missing config key '{dotted}'") from None

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def path_of(self, dotted):
        v = self.get(dotted)
        return None if v is None else self.resolve(v)

    @property
    def workdir(self):
        return self.path_of("paths.workdir")

    def stage(self, name):
        return self.workdir / STAGE_FILES[name]

    def resolved(self):
        out = copy.deepcopy(DEFAULTS)

        def merge(a, b):
            for k, v in b.items():
                if isinstance(v, dict) and isinstance(a.get(k), dict):
                    merge(a[k], v)
                else:
                    a[k] = v
        merge(out, self.raw)
        return out


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    raw = yaml.safe_load(path.read_text())
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return Config(raw, path)


def _require(cfg: Config, keys=(), files=()):
    """Fail fast: every key resolvable and every input file present."""
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing config key '{k}'")
    for f in files:
        if f is not None and not Path(f).exists():
            raise ConfigError(f"required input {f} does not exist (run the producing stage first)")


def _data_files(cfg):
    files = cfg.get("paths.data")
    files = [files] if isinstance(files, str) else list(files)
    return [cfg.resolve(f) for f in files]


def _box(v):
    if v is None or len(v) != 4:
        raise ConfigError("boxes are [lon_min, lon_max, lat_min, lat_max]")
    return GeoBox(*map(float, v))


def _mask(cfg):
    p = cfg.path_of("paths.mask")
    return OceanMask.load(p) if p is not None else None


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(cfg, command, inputs, outputs, t0, extra=None):
    man = {
        "command": command,
        "argv": sys.argv,
        "config_path": str(cfg.path),
        "config": cfg.resolved(),
        "inputs": {str(p): _sha(p) for p in inputs if p is not None and Path(p).exists()},
        "outputs": {str(p): _sha(p) for p in outputs if Path(p).exists()},
        "seed": cfg.get("seed"),
        "versions": {"nsmra": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version(), "kernel_backend": _core.BACKEND},
        "wall_time_s": time.time() - t0,
    }
    if extra:
        man.update(extra)
    path = cfg.workdir / f"manifest-{command}.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _observations(cfg):
    files = _data_files(cfg)
    _require(cfg, files=files)
    obs, report = ingest(files, _box(cfg.get("study_box")), int(cfg.get("quality_min")))
    return obs, report, files


def _residuals(cfg, obs):
    model = TrendModel.load(cfg.stage("trend"))
    return obs.with_values(obs.value - model.predict(obs.lat)), model


def _local_cfg(cfg):
    g = {k: cfg.get(f"local.{k}") for k in DEFAULTS["local"]}
    return LocalFitConfig(float(g["grid_step"]), float(g["b1_half"]), float(g["b2_half"]), int(g["n_short"]),
                          int(g["n_long"]), int(g["min_obs_b1"]), int(cfg.get("seed")),
                          None if g["fixed_nu"] is None else float(g["fixed_nu"]), int(g["restarts"]))


def _load_tree(cfg):
    return read_tree(cfg.stage("tree"))


def read_stationary(path):
    kv = {}
    lines = Path(path).read_text().splitlines()
    if lines[0].split() != ["nsmra-stationary", "1"]:
        raise ConfigError(f"{path}: not a stationary parameter file")
    for line in lines[1:]:
        k, v = line.split()
        kv[k] = float(v)
    return kv


def _kernel(cfg, kind=None):
    kind = kind or cfg.get("kernel.kind")
    if kind in ("stationary", "stationary_exponential", "stationary_matern"):
        p = read_stationary(cfg.stage("stationary"))
        return KernelSpec.stationary(p["sigma2"], p["beta"], p["tau2"], p["nu"])
    if kind in ("nonstationary", "nonstationary_exponential", "nonstationary_matern"):
        fld = ParamField.load(cfg.stage("field"))
        return KernelSpec("nonstationary_exponential" if fld.nu == 0.5 else "nonstationary_matern", field=fld)
    raise ConfigError(f"unknown kernel kind {kind!r}")


def _kernel_inputs(cfg, kind=None):
    kind = kind or cfg.get("kernel.kind")
    return [cfg.stage("stationary" if kind.startswith("stationary") else "field")]


def _plan_inputs(cfg):
    n_nodes = int(cfg.get("plan.n_nodes"))
    transport = cfg.get("plan.transport")
    if transport not in ("loopback", "socket"):
        raise ConfigError(f"plan.transport must be 'loopback' or 'socket', got {transport!r}")
    if transport == "socket" and len(cfg.get("plan.addresses")) != n_nodes:
        raise ConfigError("plan.addresses must list one host:port per node")
    return n_nodes, transport


def _grid(cfg):
    box = cfg.get("predict.box")
    meta = GridMeta.from_box(_box(box) if box is not None else _box(cfg.get("study_box")),
                             float(cfg.get("predict.step")))
    ll = meta.lonlat()
    mask = _mask(cfg)
    ocean = mask.is_ocean(ll[:, 0], ll[:, 1]) if mask is not None else np.ones(len(ll), dtype=bool)
    return meta, ll, ocean


# --------------------------------------------------------------------- commands


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
@click.version_option(__version__)
def cli(verbose):
    """Nonstationary multi-resolution Gaussian-process pipeline."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


config_opt = click.option("-c", "--config", "config_path", required=True, type=click.Path(dir_okay=False),
                          help="Pipeline YAML config.")


@cli.command("fit-trend")
@config_opt
def fit_trend_cmd(config_path):
    """Select k by cross-validation and fit the latitudinal mean."""
    t0 = time.time()
    cfg = load_config(config_path)
    _require(cfg, ["paths.workdir", "paths.data"])
    obs, report, files = _observations(cfg)
    k_range = range(int(cfg.get("trend.k_min")), int(cfg.get("trend.k_max")) + 1)
    n_bins = int(cfg.get("trend.n_bins"))
    k_best, table = select_k_cv(obs.lat, obs.value, k_range, int(cfg.get("trend.folds")), int(cfg.get("seed")),
                                n_bins, int(cfg.get("n_jobs")))
    model = fit_trend(bin_by_latitude(obs.lat, obs.value, n_bins), k_best)
    model.cv_table = table
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    model.save(cfg.stage("trend"))
    _manifest(cfg, "fit-trend", files, [cfg.stage("trend")], t0, {"ingest": report, "k": k_best})
    click.echo(f"k={k_best}")


@cli.command("estimate-local")
@config_opt
def estimate_local_cmd(config_path):
    """Local Matérn fits on the parameter grid."""
    t0 = time.time()
    cfg = load_config(config_path)
    _require(cfg, ["paths.workdir", "paths.data"], [cfg.stage("trend")])
    lcfg = _local_cfg(cfg)
    obs, report, files = _observations(cfg)
    resid, _ = _residuals(cfg, obs)
    est = local_estimate_grid(resid, lcfg, _mask(cfg), _box(cfg.get("study_box")), n_jobs=int(cfg.get("n_jobs")))
    write_estimates(cfg.stage("local"), est)
    ok = sum(e.usable for e in est)
    _manifest(cfg, "estimate-local", files + [cfg.stage("trend")], [cfg.stage("local")], t0,
              {"ingest": report, "grid_points": len(est), "usable": ok})
    click.echo(f"{ok}/{len(est)} usable local fits")


@cli.command("smooth-params")
@config_opt
def smooth_params_cmd(config_path):
    """Cross-validated Wendland/lasso smoothing of the local estimates."""
    t0 = time.time()
    cfg = load_config(config_path)
    _require(cfg, ["paths.workdir"], [cfg.stage("local")])
    est = read_estimates(cfg.stage("local"))
    box = _box(cfg.get("study_box"))
    mask = _mask(cfg)
    sets = {float(s): icosahedral_centers(box, float(s), mask) for s in cfg.get("smoothing.spacings_km")}
    sets = {k: v for k, v in sets.items() if len(v)}
    if not sets:
        raise ConfigError("no Wendland centre set has any ocean centre")
    (label, ell, lam), table = select_smoothing_cv(est, sets, [float(e) for e in cfg.get("smoothing.ells_km")],
                                                   [float(v) for v in cfg.get("smoothing.lambdas")],
                                                   int(cfg.get("smoothing.folds")), int(cfg.get("seed")),
                                                   n_jobs=int(cfg.get("n_jobs")))
    nu = cfg.get("local.fixed_nu")
    fld = smooth_field(est, sets[label], ell, lam, 0.5 if nu is None else float(nu))
    fld.save(cfg.stage("field"))
    cv_path = cfg.workdir / "smoothing_cv.txt"
    with open(cv_path, "w") as fh:
        fh.write("spacing_km ell_km lambda mspe\n")
        for (lb, el, lm) in sorted(table):
            fh.write(f"{lb:.10g} {el:.10g} {lm:.10g} {table[(lb, el, lm)]:.10g}\n")
    _manifest(cfg, "smooth-params", [cfg.stage("local")], [cfg.stage("field"), cv_path], t0,
              {"selected": {"spacing_km": label, "ell_km": ell, "lambda": lam},
               "nonzero": fld.nonzero_counts()})
    click.echo(f"spacing={label:g} ell={ell:g} lambda={lam:g} nonzero={fld.nonzero_counts()}")


@cli.command("build-tree")
@config_opt
def build_tree_cmd(config_path):
    """Coarse partition from the partition file (or one root region) plus automatic splitting."""
    t0 = time.time()
    cfg = load_config(config_path)
    _require(cfg, ["paths.workdir", "paths.data", "tree.r", "tree.threshold"])
    spec_path = cfg.path_of("paths.partition")
    _require(cfg, files=[spec_path])
    mask = _mask(cfg)
    obs, report, files = _observations(cfg)
    r = int(cfg.get("tree.r"))
    seed = int(cfg.get("seed"))
    M = cfg.get("tree.M")
    if spec_path is not None:
        tree = load_coarse_partition(spec_path, mask)
    else:
        tree = single_region_tree(_box(cfg.get("study_box")), None, r, obs.lon, obs.lat, seed)
    tree.M = int(M) if M is not None else tree.depth + 1
    tree.r = r
    threshold = int(cfg.get("tree.threshold"))
    tree = auto_split(tree, obs.lon, obs.lat, threshold, r, seed)
    rep = validate_tree(tree, mask, obs.lon, obs.lat, threshold)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    tree.save(cfg.stage("tree"))
    rep_path = cfg.workdir / "tree_report.txt"
    rep_path.write_text(f"levels {rep['levels']}\nmax_leaf_size {rep['max_leaf_size']}\n"
                        f"rejected {rep.get('rejected', 0)}\nviolations {len(rep['violations'])}\n"
                        + "".join(f"violation {v}\n" for v in rep["violations"]))
    _manifest(cfg, "build-tree", files + [spec_path], [cfg.stage("tree"), rep_path], t0, {"ingest": report})
    click.echo(f"M={tree.M} leaves={len(tree.leaves)} max_leaf={rep['max_leaf_size']}")


@cli.command("fit-stationary")
@config_opt
def fit_stationary_cmd(config_path):
    """Stationary Matérn maximum likelihood under the M-RA likelihood."""
    t0 = time.time()
    cfg = load_config(config_path)
    _require(cfg, ["paths.workdir", "paths.data"], [cfg.stage("trend"), cfg.stage("tree")])
    obs, report, files = _observations(cfg)
    resid, _ = _residuals(cfg, obs)
    tree = _load_tree(cfg)
    max_n = int(cfg.get("stationary.max_n"))
    rng = np.random.default_rng(int(cfg.get("seed")))
    idx = np.arange(len(resid)) if len(resid) <= max_n else np.sort(rng.choice(len(resid), max_n, replace=False))
    s2, b, t2 = (float(v) for v in cfg.get("stationary.init"))
    init = mra.StationaryMaternParams(s2, b, float(cfg.get("stationary.nu")), t2)
    res = mra.stationary_mle_mra(resid.lonlat[idx], resid.value[idx], tree, init, bool(cfg.get("stationary.fit_nu")),
                                 int(cfg.get("stationary.maxiter")), int(cfg.get("n_jobs")))
    p = res.params
    cfg.stage("stationary").write_text(
        f"nsmra-stationary 1\nsigma2 {p.sigma2:.17g}\nbeta {p.beta:.17g}\nnu {p.nu:.17g}\ntau2 {p.tau2:.17g}\n"
        f"loglik {res.loglik:.17g}\nn {len(idx)}\n")
    _manifest(cfg, "fit-stationary", files + [cfg.stage("trend"), cfg.stage("tree")], [cfg.stage("stationary")],
              t0, {"ingest": report, "converged": res.converged, "nfev": res.nfev})
    click.echo(f"sigma2={p.sigma2:.6g} beta={p.beta:.6g} nu={p.nu:.6g} tau2={p.tau2:.6g} loglik={res.loglik:.6g}")


def _posterior_and_predict(cfg, prior_builder, tree, y, lonlat, include_nugget):
    n_nodes, transport = _plan_inputs(cfg)
    timeout = float(cfg.get("plan.timeout"))
    n_jobs = int(cfg.get("n_jobs"))
    if n_nodes == 1:
        prior = prior_builder(None)
        return mra.predict(mra.posterior_pass(prior, y, n_jobs), lonlat, include_nugget=include_nugget,
                           n_jobs=n_jobs)
    plan = make_plan(tree, n_nodes)
    if transport == "loopback":
        dpost = run_distributed_posterior(prior_builder(None), y, plan, timeout=timeout, n_jobs=n_jobs)
        return run_distributed_predict(dpost, lonlat, include_nugget, timeout, n_jobs)
    tr = SocketTransport(0, cfg.get("plan.addresses"))
    try:
        prior = prior_builder(plan.leaves_of(0))
        state = node_posterior(0, prior, y, plan, tr, timeout, n_jobs)
        return node_predict(0, state, plan, tr, lonlat, include_nugget, timeout, n_jobs)
    finally:
        tr.close()


def _predict_setup(cfg, kind=None):
    _require(cfg, ["paths.workdir", "paths.data"], [cfg.stage("trend"), cfg.stage("tree")] + _kernel_inputs(cfg, kind))
    obs, report, files = _observations(cfg)
    resid, trend = _residuals(cfg, obs)
    tree = _load_tree(cfg)
    spec = _kernel(cfg, kind)
    n_jobs = int(cfg.get("n_jobs"))

    def builder(leaves):
        return mra.build_prior(tree, spec, resid.lonlat, n_jobs=n_jobs, leaves=leaves)

    inputs = files + [cfg.stage("trend"), cfg.stage("tree")] + _kernel_inputs(cfg, kind)
    return resid, trend, tree, builder, inputs, report


@cli.command("predict")
@config_opt
@click.option("--add-trend/--residual", default=None, help="Add the latitudinal mean back to the predictions.")
def predict_cmd(config_path, add_trend):
    """Gridded posterior mean and sd on the prediction lattice."""
    t0 = time.time()
    cfg = load_config(config_path)
    _plan_inputs(cfg)
    meta, ll, ocean = _grid(cfg)
    resid, trend, tree, builder, inputs, report = _predict_setup(cfg)
    pf = _posterior_and_predict(cfg, builder, tree, resid.value, ll[ocean], include_nugget=False)
    mean = np.zeros(meta.n)
    sd = np.zeros(meta.n)
    mean[ocean], sd[ocean] = pf.mean, pf.sd
    valid = ocean.copy()
    valid[np.nonzero(ocean)[0][list(pf.errors)]] = False
    add = cfg.get("predict.add_trend") if add_trend is None else add_trend
    if add:
        mean[valid] += trend.predict(ll[valid, 1])
    prefix = cfg.workdir / "grid"
    export_grid(prefix, meta, mean, sd, valid, text=bool(cfg.get("predict.text")))
    outs = [prefix.with_suffix(".hdr"), Path(f"{prefix}.mean.bin"), Path(f"{prefix}.sd.bin"), Path(f"{prefix}.txt")]
    _manifest(cfg, "predict", inputs, outs, t0, {"ingest": report, "cells": meta.n, "ocean_cells": int(valid.sum()),
                                               "trend_added": bool(add)})
    click.echo(f"predicted {int(valid.sum())} ocean cells on a {meta.nlat}x{meta.nlon} grid")


def _model_label(kind):
    return "stationary" if kind.startswith("stationary") else "nonstationary"


@cli.command("evaluate")
@config_opt
def evaluate_cmd(config_path):
    """Score held-out observations (paths.test) on the residual scale."""
    t0 = time.time()
    cfg = load_config(config_path)
    _require(cfg, ["paths.test"], [cfg.path_of("paths.test")])
    _plan_inputs(cfg)
    resid, trend, tree, builder, inputs, report = _predict_setup(cfg)
    test = read_any(cfg.path_of("paths.test"))
    y = test.value - trend.predict(test.lat)
    pf = _posterior_and_predict(cfg, builder, tree, resid.value, test.lonlat, include_nugget=True)
    ok = np.isfinite(pf.mean)
    rep = ScoreReport.from_predictions(y[ok], pf.mean[ok], pf.sd[ok], test.lonlat[ok])
    name = _model_label(cfg.get("kernel.kind"))
    summary = summarize({name: [rep]})
    scores_path, summary_path = cfg.workdir / "scores.txt", cfg.workdir / "summary.txt"
    write_scores(scores_path, [rep])
    write_summary(summary_path, summary)
    levels = (0.5, 0.8, 0.9, 0.95, 0.99)
    cov = coverage_curve(y[ok], pf.mean[ok], pf.sd[ok], levels)
    cov_path = cfg.workdir / "coverage.txt"
    cov_path.write_text("level coverage\n" + "".join(f"{a:g} {c:.10g}\n" for a, c in zip(levels, cov)))
    _manifest(cfg, "evaluate", inputs + [cfg.path_of("paths.test")], [scores_path, summary_path, cov_path], t0,
              {"scored": int(ok.sum()), "outside_tree": int((~ok).sum())})
    click.echo(f"{name}: MSPE={rep.mspe:.6g} logscore={rep.logscore:.6g} CRPS={rep.crps:.6g}")


@cli.command("gap-experiment")
@config_opt
def gap_experiment_cmd(config_path):
    """Gap-holdout comparison of the configured models."""
    t0 = time.time()
    cfg = load_config(config_path)
    models = list(cfg.get("experiment.models"))
    inputs = []
    for mdl in models:
        inputs += _kernel_inputs(cfg, mdl)
    _require(cfg, ["paths.workdir", "paths.data"], [cfg.stage("trend"), cfg.stage("tree")] + inputs)
    n_nodes, transport = _plan_inputs(cfg)
    if transport != "loopback":
        raise ConfigError("gap-experiment supports the loopback transport only")
    obs, report, files = _observations(cfg)
    trend = TrendModel.load(cfg.stage("trend"))
    tree = _load_tree(cfg)
    ex = GapExperimentConfig(float(cfg.get("experiment.gap_lon")), float(cfg.get("experiment.gap_lat")),
                             int(cfg.get("experiment.min_obs")), int(cfg.get("experiment.test_size")),
                             int(cfg.get("experiment.replicates")), int(cfg.get("seed")))
    pipes = {_model_label(m): MRAPipeline(_kernel(cfg, m), tree, trend, n_nodes, int(cfg.get("n_jobs")))
             for m in models}
    res = run_gap_experiment(obs, pipes, ex, _mask(cfg), domain=_box(cfg.get("study_box")))
    scores_path, summary_path = cfg.workdir / "gap_scores.txt", cfg.workdir / "gap_summary.txt"
    reps = [r for name in pipes for r in res.reports[name]]
    write_scores(scores_path, reps)
    write_summary(summary_path, res.summary)
    _manifest(cfg, "gap-experiment", files + [cfg.stage("trend"), cfg.stage("tree")] + inputs,
              [scores_path, summary_path], t0, {"failures": res.failures})
    click.echo(summary_path.read_text().rstrip())


@cli.command("serve-worker")
@config_opt
@click.option("--rank", type=int, required=True, help="Node rank (1..n_nodes-1).")
@click.option("--task", type=click.Choice(["predict", "evaluate"]), default="predict",
              help="Which rank-0 command this worker serves.")
def serve_worker_cmd(config_path, rank, task):
    """Host one node of a socket-transport run."""
    cfg = load_config(config_path)
    n_nodes, transport = _plan_inputs(cfg)
    if transport != "socket" or not 1 <= rank < n_nodes:
        raise ConfigError("serve-worker needs plan.transport=socket and 1 <= rank < plan.n_nodes")
    include_nugget = task == "evaluate"
    if task == "evaluate":
        _require(cfg, ["paths.test"], [cfg.path_of("paths.test")])
    resid, trend, tree, builder, _, _ = _predict_setup(cfg)
    if task == "predict":
        _, ll, ocean = _grid(cfg)
        targets = ll[ocean]
    else:
        targets = read_any(cfg.path_of("paths.test")).lonlat
    plan = make_plan(tree, n_nodes)
    tr = SocketTransport(rank, cfg.get("plan.addresses"))
    try:
        timeout = float(cfg.get("plan.timeout"))
        state = node_posterior(rank, builder(plan.leaves_of(rank)), resid.value, plan, tr, timeout,
                               int(cfg.get("n_jobs")))
        node_predict(rank, state, plan, tr, targets, include_nugget, timeout, int(cfg.get("n_jobs")))
    finally:
        tr.close()
    click.echo(f"worker {rank} done")


def exit_code_for(exc):
    from .mra import MRANumericalError

    if isinstance(exc, (TransportError, ChecksumError, FrameError, ConnectionError)):
        return EXIT_TRANSPORT
    if isinstance(exc, (MRANumericalError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, KeyError, FileNotFoundError, click.ClickException)):
        return EXIT_VALIDATION
    return 1


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code_for(exc)
        click.echo(f"error: {exc}", err=True)
        if code == 1:
            raise
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
