"""Synthetic data: draws from the M-RA process over an automatically built tree."""

from __future__ import annotations

import math

import numpy as np

from . import mra
from .covariance import KernelSpec
from .data import Observations
from .geo import GeoBox
from .partition import auto_split, single_region_tree


def uniform_locations(box: GeoBox, n, rng):
    """Uniform on the sphere within ``box``."""
    lon = box.lon_min + box.lon_extent * rng.random(n)
    s0, s1 = math.sin(math.radians(box.lat_min)), math.sin(math.radians(box.lat_max))
    lat = np.degrees(np.arcsin(s0 + (s1 - s0) * rng.random(n)))
    return np.column_stack([((lon + 180.0) % 360.0) - 180.0, lat])


def auto_tree(box: GeoBox, lonlat, M, r, threshold, seed=0):
    tree = single_region_tree(box, M, r, lonlat[:, 0], lonlat[:, 1], seed)
    return auto_split(tree, lonlat[:, 0], lonlat[:, 1], threshold, r, seed)


def simulate_process(lonlat, spec: KernelSpec, box: GeoBox, seed=0, M=4, r=64, threshold=1500, nugget=True):
    """One M-RA draw at ``lonlat``; returns (values, tree, prior)."""
    lonlat = np.asarray(lonlat, dtype=np.float64)
    tree = auto_tree(box, lonlat, M, r, threshold, seed)
    prior = mra.build_prior(tree, spec, lonlat)
    return mra.simulate(prior, np.random.default_rng(seed), nugget=nugget), tree, prior


def synthetic_observations(box: GeoBox, n, spec: KernelSpec, seed=0, trend=None, **kw) -> Observations:
    rng = np.random.default_rng([seed, 1])
    ll = uniform_locations(box, n, rng)
    y, _, _ = simulate_process(ll, spec, box, seed, **kw)
    if trend is not None:
        y = y + trend(ll[:, 1])
    return Observations(ll[:, 0], ll[:, 1], y, np.full(n, 5, dtype=np.int32))
