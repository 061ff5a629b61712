"""Observation records: columnar text / packed binary formats and ingestion filters."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GeoBox, normalize_lon

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"NSOB"
BINARY_VERSION = 1
_REC = np.dtype([("lon", "<f8"), ("lat", "<f8"), ("value", "<f8"), ("quality", "<i4")])


class IngestError(ValueError):
    pass


@dataclass
class Observations:
    """Columnar observation set (lon/lat in degrees, value in Kelvin)."""

    lon: np.ndarray
    lat: np.ndarray
    value: np.ndarray
    quality: np.ndarray | None = None

    def __post_init__(self):
        self.lon = normalize_lon(np.asarray(self.lon, dtype=np.float64))
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.quality is None:
            self.quality = np.full(len(self.lon), 5, dtype=np.int32)
        self.quality = np.asarray(self.quality, dtype=np.int32)

    def __len__(self):
        return len(self.lon)

    @property
    def lonlat(self):
        return np.column_stack([self.lon, self.lat])

    def take(self, idx):
        return Observations(self.lon[idx], self.lat[idx], self.value[idx], self.quality[idx])

    def with_values(self, value):
        return Observations(self.lon, self.lat, value, self.quality)

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return Observations(*(np.concatenate([getattr(p, f) for p in parts])
                              for f in ("lon", "lat", "value", "quality")))


def read_text(path) -> Observations:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("lon"):
            continue
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError
            rows.append((float(parts[0]), float(parts[1]), float(parts[2]), int(parts[3])))
        except ValueError:
            raise IngestError(f"{path}:{lineno}: malformed row {raw!r}") from None
    if not rows:
        return Observations(np.empty(0), np.empty(0), np.empty(0), np.empty(0, dtype=np.int32))
    a = np.array(rows, dtype=object)
    return Observations(a[:, 0].astype(float), a[:, 1].astype(float), a[:, 2].astype(float),
                        a[:, 3].astype(np.int32))


def write_text(path, obs: Observations):
    with open(path, "w") as fh:
        fh.write("lon lat value quality\n")
        for lo, la, v, q in zip(obs.lon, obs.lat, obs.value, obs.quality):
            fh.write(f"{lo:.17g} {la:.17g} {v:.17g} {int(q)}\n")


def write_binary(path, obs: Observations):
    rec = np.empty(len(obs), dtype=_REC)
    rec["lon"], rec["lat"], rec["value"], rec["quality"] = obs.lon, obs.lat, obs.value, obs.quality
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<HQ", BINARY_VERSION, len(obs)))
        fh.write(rec.tobytes())


def read_binary(path) -> Observations:
    raw = Path(path).read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise IngestError(f"{path}: bad magic")
    version, n = struct.unpack_from("<HQ", raw, 4)
    if version != BINARY_VERSION:
        raise IngestError(f"{path}: unsupported version {version}")
    body = raw[14:]
    if len(body) != n * _REC.itemsize:
        raise IngestError(f"{path}: truncated body")
    rec = np.frombuffer(body, dtype=_REC)
    return Observations(rec["lon"].copy(), rec["lat"].copy(), rec["value"].copy(), rec["quality"].copy())


def read_any(path) -> Observations:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_binary(path) if head == BINARY_MAGIC else read_text(path)


def collapse_duplicates(obs: Observations):
    """Average records sharing exact (lon, lat); returns (obs, n_collapsed)."""
    if len(obs) == 0:
        return obs, 0
    keys = np.column_stack([obs.lon, obs.lat])
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if len(uniq) == len(obs):
        order = np.lexsort((obs.lon, obs.lat))
        return obs.take(order), 0
    sums = np.bincount(inv, weights=obs.value, minlength=len(uniq))
    qual = np.full(len(uniq), np.iinfo(np.int32).max, dtype=np.int64)
    np.minimum.at(qual, inv, obs.quality)
    out = Observations(uniq[:, 0], uniq[:, 1], sums / counts, qual.astype(np.int32))
    order = np.lexsort((out.lon, out.lat))
    return out.take(order), int(len(obs) - len(uniq))


def ingest(files, study_box: GeoBox | None = None, quality_min=2):
    """Load, filter by quality and study band, and deduplicate.

    Returns ``(observations, report)`` where report counts each filter reason.
    """
    parts = [read_any(f) for f in files]
    obs = Observations.concat(parts) if parts else Observations(np.empty(0), np.empty(0), np.empty(0))
    report = {"read": len(obs)}
    keep = obs.quality >= quality_min
    report["dropped_quality"] = int((~keep).sum())
    obs = obs.take(np.nonzero(keep)[0])
    if study_box is not None:
        inside = study_box.contains(obs.lon, obs.lat)
        report["dropped_outside_box"] = int((~inside).sum())
        obs = obs.take(np.nonzero(inside)[0])
    obs, ndup = collapse_duplicates(obs)
    report["collapsed_duplicates"] = ndup
    report["retained"] = len(obs)
    for k, v in report.items():
        logger.info("ingest %s: %d", k, v)
    return obs, report
