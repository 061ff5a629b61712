"""Gridded mean/sd product: flat little-endian binary layers plus a text header."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GeoBox, normalize_lon

GRID_TAG = "nsmra-grid"
GRID_VERSION = 1
FILL = -9999.0


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridMeta:
    lon0: float
    lat0: float
    step: float
    nlon: int
    nlat: int

    @classmethod
    def from_box(cls, box: GeoBox, step):
        """Lattice with inclusive endpoints (longitude endpoint dropped on a full wrap)."""
        if step <= 0:
            raise GridError("grid step must be positive")
        eps = 1e-9
        nlat = int(math.floor((box.lat_max - box.lat_min) / step + eps)) + 1
        nlon = int(math.floor(box.lon_extent / step + eps)) + 1
        if box.lon_extent >= 360.0 and abs((nlon - 1) * step - 360.0) < 1e-6:
            nlon -= 1
        return cls(box.lon_min, box.lat_min, float(step), nlon, nlat)

    @property
    def n(self):
        return self.nlon * self.nlat

    @property
    def lon_max(self):
        return self.lon0 + (self.nlon - 1) * self.step

    @property
    def lat_max(self):
        return self.lat0 + (self.nlat - 1) * self.step

    def lonlat(self):
        """Cell coordinates, latitude slowest and longitude fastest."""
        lats = self.lat0 + self.step * np.arange(self.nlat)
        lons = normalize_lon(self.lon0 + self.step * np.arange(self.nlon))
        LAT, LON = np.meshgrid(lats, lons, indexing="ij")
        return np.column_stack([LON.ravel(), LAT.ravel()])


def export_grid(prefix, meta: GridMeta, mean, sd, ocean=None, text=False, fill=FILL, units="K"):
    """Write ``prefix.hdr``, ``prefix.mean.bin``, ``prefix.sd.bin`` (and ``prefix.txt``)."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    if mean.shape != (meta.n,) or sd.shape != (meta.n,):
        raise GridError(f"field sizes {mean.shape}/{sd.shape} do not match the {meta.nlat}x{meta.nlon} grid")
    ocean = np.ones(meta.n, dtype=bool) if ocean is None else np.asarray(ocean, dtype=bool)
    if ocean.shape != (meta.n,):
        raise GridError("ocean mask size does not match the grid")
    m = np.where(ocean, mean, fill)
    s = np.where(ocean, sd, fill)
    prefix = Path(prefix)
    header = [f"{GRID_TAG} {GRID_VERSION}", f"lon0 {meta.lon0:.17g}", f"lat0 {meta.lat0:.17g}",
              f"step {meta.step:.17g}", f"nlon {meta.nlon}", f"nlat {meta.nlat}",
              "order row-major latitude-slowest longitude-fastest", "dtype float64 little-endian",
              f"units {units}", f"fill {fill:.17g}", "crs geographic lon/lat degrees on a sphere",
              "layers mean sd"]
    prefix.with_suffix(".hdr").write_text("\n".join(header) + "\n")
    Path(f"{prefix}.mean.bin").write_bytes(m.astype("<f8").tobytes())
    Path(f"{prefix}.sd.bin").write_bytes(s.astype("<f8").tobytes())
    if text:
        ll = meta.lonlat()
        with open(f"{prefix}.txt", "w") as fh:
            fh.write("lon lat mean sd\n")
            for (lo, la), a, b in zip(ll, m, s):
                fh.write(f"{lo:.10g} {la:.10g} {a:.10g} {b:.10g}\n")


def read_grid(prefix):
    prefix = Path(prefix)
    lines = prefix.with_suffix(".hdr").read_text().splitlines()
    tag, ver = lines[0].split()
    if tag != GRID_TAG or int(ver) != GRID_VERSION:
        raise GridError(f"{prefix}: not a version-{GRID_VERSION} grid header")
    kv = dict(line.split(" ", 1) for line in lines[1:])
    meta = GridMeta(float(kv["lon0"]), float(kv["lat0"]), float(kv["step"]), int(kv["nlon"]), int(kv["nlat"]))
    mean = np.frombuffer(Path(f"{prefix}.mean.bin").read_bytes(), dtype="<f8")
    sd = np.frombuffer(Path(f"{prefix}.sd.bin").read_bytes(), dtype="<f8")
    if len(mean) != meta.n or len(sd) != meta.n:
        raise GridError(f"{prefix}: layer size does not match header dims")
    return meta, mean.copy(), sd.copy(), float(kv["fill"])
