"""Coordinates, chordal geometry on the sphere, lon/lat boxes and the ocean mask.

Angles are degrees, distances are km. Points on the sphere are embedded in
R^3 and all kernel distances are chordal (straight-line) distances.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.ops import unary_union

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0


class GeoDomainError(ValueError):
    """Raised for invalid coordinates or boxes."""


def normalize_lon(lon):
    """Wrap longitudes into [-180, 180)."""
    lon = np.asarray(lon, dtype=np.float64)
    out = np.mod(lon + 180.0, 360.0) - 180.0
    # mod can round up to exactly 180 for tiny negative inputs
    return np.where(out >= 180.0, out - 360.0, out)


def check_lat(lat):
    lat = np.asarray(lat, dtype=np.float64)
    if not np.all(np.isfinite(lat)) or np.any(np.abs(lat) > 90.0):
        raise GeoDomainError("latitude outside [-90, 90]")
    return lat


@dataclass(frozen=True)
class LonLat:
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise GeoDomainError(f"non-finite coordinate ({self.lon}, {self.lat})")
        if abs(self.lat) > 90.0:
            raise GeoDomainError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", float(normalize_lon(self.lon)))
        object.__setattr__(self, "lat", float(self.lat))


def lonlat_to_xyz(lon, lat, radius=EARTH_RADIUS_KM):
    """Embed lon/lat arrays on the sphere of ``radius``; returns shape (n, 3)."""
    if radius <= 0:
        raise GeoDomainError("radius must be positive")
    lat = check_lat(lat)
    lam = np.radians(np.asarray(lon, dtype=np.float64))
    phi = np.radians(lat)
    cphi = np.cos(phi)
    xyz = np.stack([cphi * np.cos(lam), cphi * np.sin(lam), np.sin(phi)], axis=-1)
    return radius * np.atleast_2d(xyz)


def xyz_to_lonlat(xyz):
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    r = np.linalg.norm(xyz, axis=1)
    lat = np.degrees(np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0)))
    lon = normalize_lon(np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0])))
    return lon, lat


def to_point3(p: LonLat, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    return lonlat_to_xyz(p.lon, p.lat, radius)[0]


def chordal_distance(a: LonLat, b: LonLat, radius: float = EARTH_RADIUS_KM) -> float:
    return float(np.linalg.norm(to_point3(a, radius) - to_point3(b, radius)))


def great_circle_distance(a: LonLat, b: LonLat, radius: float = EARTH_RADIUS_KM) -> float:
    pa, pb = to_point3(a, 1.0), to_point3(b, 1.0)
    # atan2 form stays accurate for tiny separations
    return radius * math.atan2(np.linalg.norm(np.cross(pa, pb)), float(pa @ pb))


@dataclass(frozen=True)
class GeoBox:
    """Lon/lat rectangle. ``lon_max < lon_min`` denotes an antimeridian wrap."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise GeoDomainError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")
        if self.lat_min < -90 or self.lat_max > 90:
            raise GeoDomainError("box latitude outside [-90, 90]")
        if self.lon_extent <= 0 or self.lon_extent > 360:
            raise GeoDomainError("longitudinal extent must be in (0, 360]")

    @classmethod
    def centered(cls, lon, lat, half_lon, half_lat=None):
        half_lat = half_lon if half_lat is None else half_lat
        lo = float(normalize_lon(lon - half_lon)) if half_lon < 180 else -180.0
        hi = lo + min(2 * half_lon, 360.0)
        return cls(lo, hi, max(lat - half_lat, -90.0), min(lat + half_lat, 90.0))

    @property
    def lon_extent(self) -> float:
        ext = self.lon_max - self.lon_min
        return ext if ext > 0 else ext + 360.0

    @property
    def center(self):
        return float(normalize_lon(self.lon_min + 0.5 * self.lon_extent)), 0.5 * (self.lat_min + self.lat_max)

    def contains(self, lon, lat):
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        off = np.mod(lon - self.lon_min, 360.0)
        inlon = off <= self.lon_extent + 1e-12
        if self.lon_extent >= 360.0:
            inlon = np.ones_like(off, dtype=bool)
        return inlon & (lat >= self.lat_min) & (lat <= self.lat_max)

    def area_km2(self, radius=EARTH_RADIUS_KM) -> float:
        dlam = math.radians(self.lon_extent)
        return radius**2 * dlam * (math.sin(math.radians(self.lat_max)) - math.sin(math.radians(self.lat_min)))

    def polygon(self) -> Polygon:
        lo = self.lon_min
        hi = lo + self.lon_extent
        return Polygon([(lo, self.lat_min), (hi, self.lat_min), (hi, self.lat_max), (lo, self.lat_max)])


class OceanMask:
    """Land polygons in lon/lat; everything else is ocean.

    Points on a land boundary are land.
    """

    def __init__(self, land=None):
        self.land = land if land is not None and not land.is_empty else None

    @classmethod
    def all_ocean(cls):
        return cls(None)

    @classmethod
    def from_rings(cls, rings):
        """Build from rings; rings sharing the first ring's orientation are land,
        rings of opposite orientation carve ocean out of land."""
        if not rings:
            return cls(None)
        polys = [Polygon(r) for r in rings]
        ccw0 = polys[0].exterior.is_ccw
        land = [p for p in polys if p.exterior.is_ccw == ccw0]
        holes = [p for p in polys if p.exterior.is_ccw != ccw0]
        geom = unary_union([p.buffer(0) for p in land])
        if holes:
            geom = geom.difference(unary_union([p.buffer(0) for p in holes]))
        return cls(geom)

    @classmethod
    def load(cls, path):
        return cls.from_rings(read_rings(path))

    def is_ocean(self, lon, lat):
        lon = np.atleast_1d(normalize_lon(lon))
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        if self.land is None:
            return np.ones(lon.shape, dtype=bool)
        return ~shapely.intersects_xy(self.land, lon, lat)

    def rasterize(self, res_deg, box: GeoBox | None = None):
        return RasterMask.from_mask(self, res_deg, box)


class RasterMask:
    """Cell-centre rasterization of an :class:`OceanMask`."""

    def __init__(self, ocean, res_deg, lon0, lat0):
        self.ocean = np.asarray(ocean, dtype=bool)
        self.res = float(res_deg)
        self.lon0 = float(lon0)
        self.lat0 = float(lat0)

    @classmethod
    def from_mask(cls, mask, res_deg, box=None):
        box = box or GeoBox(-180.0, 180.0, -90.0, 90.0)
        nlat = max(int(round((box.lat_max - box.lat_min) / res_deg)), 1)
        nlon = max(int(round(box.lon_extent / res_deg)), 1)
        clat = box.lat_min + (np.arange(nlat) + 0.5) * res_deg
        clon = box.lon_min + (np.arange(nlon) + 0.5) * res_deg
        LON, LAT = np.meshgrid(clon, clat)
        ocean = mask.is_ocean(LON.ravel(), LAT.ravel()).reshape(LON.shape)
        return cls(ocean, res_deg, box.lon_min, box.lat_min)

    def cell_centers(self):
        """Lon/lat of ocean cell centres, row-major (lat, lon) order."""
        ii, jj = np.nonzero(self.ocean)
        lon = normalize_lon(self.lon0 + (jj + 0.5) * self.res)
        lat = self.lat0 + (ii + 0.5) * self.res
        return np.column_stack([lon, lat])

    def is_ocean(self, lon, lat):
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        j = np.floor(np.mod(lon - self.lon0, 360.0) / self.res).astype(int)
        i = np.floor((lat - self.lat0) / self.res).astype(int)
        ok = (i >= 0) & (i < self.ocean.shape[0]) & (j >= 0) & (j < self.ocean.shape[1])
        out = np.zeros(lon.shape, dtype=bool)
        out[ok] = self.ocean[i[ok], j[ok]]
        return out


def read_rings(path):
    """Parse a ring file: ``lon lat`` per line, rings separated by blank lines."""
    rings, cur = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if cur:
                rings.append(cur)
                cur = []
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'lon lat', got {raw!r}")
        cur.append((float(parts[0]), float(parts[1])))
    if cur:
        rings.append(cur)
    for k, ring in enumerate(rings):
        if len(ring) < 3:
            raise ValueError(f"{path}: ring {k} has fewer than 3 vertices")
    return rings


def write_rings(path, rings):
    blocks = ["\n".join(f"{lon:.10g} {lat:.10g}" for lon, lat in ring) for ring in rings]
    Path(path).write_text("\n\n".join(blocks) + "\n")


def make_grid(box: GeoBox, step_deg: float, mask: OceanMask | None = None) -> np.ndarray:
    """Regular lon/lat lattice anchored at the box's lower-left corner.

    Latitude endpoints are inclusive. The longitude endpoint is inclusive
    unless it wraps onto the starting meridian. Returns an (n, 2) array of
    (lon, lat), land points removed.
    """
    if step_deg <= 0:
        raise GeoDomainError("step_deg must be positive")
    eps = 1e-9
    nlat = int(math.floor((box.lat_max - box.lat_min) / step_deg + eps)) + 1
    nlon = int(math.floor(box.lon_extent / step_deg + eps)) + 1
    if box.lon_extent >= 360.0 and abs((nlon - 1) * step_deg - 360.0) < 1e-6:
        nlon -= 1
    lats = box.lat_min + step_deg * np.arange(nlat)
    lons = normalize_lon(box.lon_min + step_deg * np.arange(nlon))
    LAT, LON = np.meshgrid(lats, lons, indexing="ij")
    pts = np.column_stack([LON.ravel(), LAT.ravel()])
    if mask is not None and len(pts):
        pts = pts[mask.is_ocean(pts[:, 0], pts[:, 1])]
    return pts


_PHI = (1.0 + math.sqrt(5.0)) / 2.0


def icosahedral_mesh(level: int):
    """Vertices (unit sphere) and triangular faces of a subdivided icosahedron."""
    verts = [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(V), np.array(faces)


def icosahedral_level_for_spacing(target_spacing, radius=EARTH_RADIUS_KM):
    # base chord between neighbouring icosahedron vertices is ~1.0515 R
    base = 1.0514622 * radius
    return max(0, int(round(math.log2(base / target_spacing))))


def icosahedral_centers(domain: GeoBox, target_spacing: float, mask: OceanMask | None = None,
                        radius=EARTH_RADIUS_KM, level: int | None = None) -> np.ndarray:
    """Near-equally spaced ocean centres inside ``domain`` as (n, 2) lon/lat."""
    if target_spacing <= 0:
        raise GeoDomainError("target_spacing must be positive")
    if level is None:
        level = icosahedral_level_for_spacing(target_spacing, radius)
    V, _ = icosahedral_mesh(level)
    lon, lat = xyz_to_lonlat(V)
    keep = domain.contains(lon, lat)
    pts = np.column_stack([lon[keep], lat[keep]])
    if len(pts) == 0:
        # spacing coarser than the domain: fall back to its centre
        pts = np.array([domain.center])
    if mask is not None:
        pts = pts[mask.is_ocean(pts[:, 0], pts[:, 1])]
        if len(pts) == 0:
            warnings.warn("all icosahedral centres fall on land", RuntimeWarning, stacklevel=2)
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    return pts[order]
