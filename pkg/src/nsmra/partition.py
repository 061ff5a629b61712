"""Hierarchical domain decomposition into the M-RA region tree.

Coarse levels come from a partition-spec file (polygons plus knots); finer
levels are produced by :func:`auto_split`, which bisects regions across their
longer extent at the mean coordinate of their observations. Region ids are
``(level, index)`` tuples; lower index means lower id.

Partition-spec grammar (``#`` starts a comment)::

    nsmra-partition 1
    M <int>            # optional, total number of levels
    r <int>            # optional, knots per non-leaf region
    region
    level <int>
    id <int>           # index within the level
    parent <int>|-     # parent's index at level-1
    source file|auto   # optional
    polygon
    <lon> <lat>        # >= 3 vertices
    knots
    <lon> <lat>        # zero or more
    end
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon, box as shapely_box
from shapely.ops import unary_union

from .geo import EARTH_RADIUS_KM, GeoBox, OceanMask

logger = logging.getLogger(__name__)

SPEC_TAG = "nsmra-partition"
SPEC_VERSION = 1


class PartitionError(ValueError):
    pass


@dataclass
class Region:
    level: int
    index: int
    boundary: Polygon
    parent: int | None = None  # index at level - 1
    children: list = field(default_factory=list)  # indices at level + 1
    knots: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    source: str = "file"

    @property
    def id(self):
        return (self.level, self.index)


class RegionTree:
    """Regions per level (lists ordered by index) plus tree metadata."""

    def __init__(self, levels, M=None, r=None, J=2):
        self.levels = levels  # list over level-1 of lists of Region
        self.M = M if M is not None else len(levels)
        self.r = r
        self.J = J

    @property
    def depth(self):
        return len(self.levels)

    def region(self, level, index) -> Region:
        return self.levels[level - 1][index]

    def regions(self, level):
        return self.levels[level - 1]

    @property
    def leaves(self):
        return self.levels[-1]

    def ancestors(self, level, index):
        """Indices of the chain from level 1 down to (level, index), inclusive."""
        chain = [index]
        for m in range(level, 1, -1):
            chain.append(self.region(m, chain[-1]).parent)
        return chain[::-1]

    def copy(self):
        import copy

        return copy.deepcopy(self)

    def save(self, path):
        write_partition(path, self)


# ------------------------------------------------------------------ file I/O


def _poly_area(p):
    return p.area if not p.is_empty else 0.0


def parse_partition(text, origin="<spec>"):
    header = {}
    blocks = []
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    it = iter(enumerate(lines, 1))
    first = None
    for lineno, line in it:
        if line:
            first = (lineno, line)
            break
    if first is None or first[1].split()[0] != SPEC_TAG:
        raise PartitionError(f"{origin}: missing '{SPEC_TAG}' header")
    if int(first[1].split()[1]) != SPEC_VERSION:
        raise PartitionError(f"{origin}: unsupported version")
    cur = None
    mode = None
    for lineno, line in it:
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if cur is None:
            if key in ("M", "r", "J"):
                header[key] = int(parts[1])
            elif key == "region":
                cur = {"polygon": [], "knots": [], "source": "file", "line": lineno}
                mode = None
            else:
                raise PartitionError(f"{origin}:{lineno}: unexpected {line!r}")
            continue
        if key == "end":
            blocks.append(cur)
            cur = None
        elif key in ("level", "id"):
            cur[key] = int(parts[1])
        elif key == "parent":
            cur["parent"] = None if parts[1] == "-" else int(parts[1])
        elif key == "source":
            cur["source"] = parts[1]
        elif key in ("polygon", "knots"):
            mode = key
        else:
            try:
                lon, lat = float(parts[0]), float(parts[1])
            except (ValueError, IndexError):
                raise PartitionError(f"{origin}:{lineno}: malformed vertex {line!r}") from None
            if mode is None or len(parts) != 2:
                raise PartitionError(f"{origin}:{lineno}: vertex outside polygon/knots section")
            cur[mode].append((lon, lat))
    if cur is not None:
        raise PartitionError(f"{origin}: region block starting line {cur['line']} not closed")
    return header, blocks


def _tree_from_blocks(header, blocks, origin):
    if not blocks:
        raise PartitionError(f"{origin}: no regions")
    depth = max(b["level"] for b in blocks)
    levels = [[] for _ in range(depth)]
    for b in blocks:
        for k in ("level", "id"):
            if k not in b:
                raise PartitionError(f"{origin}: region at line {b['line']} lacks '{k}'")
        if len(b["polygon"]) < 3:
            raise PartitionError(f"{origin}: region {(b['level'], b['id'])} needs >= 3 polygon vertices")
        levels[b["level"] - 1].append(b)
    tree_levels = []
    for m, bl in enumerate(levels, 1):
        bl.sort(key=lambda b: b["id"])
        if [b["id"] for b in bl] != list(range(len(bl))):
            raise PartitionError(f"{origin}: level {m} ids must be 0..{len(bl) - 1}")
        regs = []
        for b in bl:
            poly = Polygon(b["polygon"])
            if not poly.is_valid:
                poly = poly.buffer(0)
            regs.append(Region(m, b["id"], poly, b.get("parent"), [],
                               np.array(b["knots"], dtype=float).reshape(-1, 2), b["source"]))
        tree_levels.append(regs)
    for m in range(2, depth + 1):
        for reg in tree_levels[m - 1]:
            if reg.parent is None or not (0 <= reg.parent < len(tree_levels[m - 2])):
                raise PartitionError(f"{origin}: region {reg.id} has invalid parent {reg.parent}")
            tree_levels[m - 2][reg.parent].children.append(reg.index)
    for reg in tree_levels[0]:
        if reg.parent is not None:
            raise PartitionError(f"{origin}: level-1 region {reg.id} must have parent '-'")
    return RegionTree(tree_levels, M=header.get("M"), r=header.get("r"), J=header.get("J", 2))


def read_tree(path) -> RegionTree:
    """Read a machine-written tree export (no geometric re-validation)."""
    header, blocks = parse_partition(Path(path).read_text(), str(path))
    return _tree_from_blocks(header, blocks, str(path))


def write_partition(path, tree: RegionTree):
    out = [f"{SPEC_TAG} {SPEC_VERSION}", f"M {tree.M}"]
    if tree.r is not None:
        out.append(f"r {tree.r}")
    out.append(f"J {tree.J}")
    for regs in tree.levels:
        for reg in regs:
            out += ["region", f"level {reg.level}", f"id {reg.index}",
                    f"parent {'-' if reg.parent is None else reg.parent}", f"source {reg.source}", "polygon"]
            geoms = getattr(reg.boundary, "geoms", [reg.boundary])
            ring = max(geoms, key=lambda g: g.area).exterior.coords[:-1]
            out += [f"{x:.17g} {y:.17g}" for x, y in ring]
            out.append("knots")
            out += [f"{x:.17g} {y:.17g}" for x, y in reg.knots]
            out.append("end")
    Path(path).write_text("\n".join(out) + "\n")


def _covered(poly, lon, lat):
    lon = np.atleast_1d(lon)
    lat = np.atleast_1d(lat)
    if len(lon) == 0:
        return np.zeros(0, dtype=bool)
    return shapely.intersects_xy(poly, lon, lat)


def _land_within(mask, geom):
    if mask is None or mask.land is None:
        return Polygon()
    return mask.land.intersection(geom)


def check_nesting(tree: RegionTree, mask: OceanMask | None = None, levels=None, rel_tol=1e-9):
    """Partition violations: overlapping siblings and uncovered parent ocean area."""
    problems = []
    levels = levels or range(1, tree.depth)
    for m in levels:
        if m >= tree.depth:
            continue
        for parent in tree.regions(m):
            kids = [tree.region(m + 1, c) for c in parent.children]
            if not kids:
                continue
            tol = rel_tol * max(parent.boundary.area, 1e-12)
            for i in range(len(kids)):
                for j in range(i + 1, len(kids)):
                    ov = _poly_area(kids[i].boundary.intersection(kids[j].boundary))
                    if ov > tol:
                        problems.append(f"overlapping sibling regions {kids[i].id} and {kids[j].id} "
                                        f"(area {ov:.3g} deg^2)")
            union = unary_union([k.boundary for k in kids])
            gap = parent.boundary.difference(union)
            gap = gap.difference(_land_within(mask, gap)) if not gap.is_empty else gap
            if _poly_area(gap) > tol:
                problems.append(f"children of {parent.id} leave {_poly_area(gap):.3g} deg^2 of ocean uncovered")
            spill = union.difference(parent.boundary)
            if _poly_area(spill) > tol:
                problems.append(f"children of {parent.id} extend {_poly_area(spill):.3g} deg^2 outside it")
    return problems


def check_knots(tree: RegionTree, mask: OceanMask | None = None, levels=None):
    problems = []
    levels = levels or range(1, tree.depth)
    for m in levels:
        for reg in tree.regions(m):
            if len(reg.knots) == 0:
                continue
            inside = _covered(reg.boundary, reg.knots[:, 0], reg.knots[:, 1])
            for k in np.nonzero(~inside)[0]:
                problems.append(f"knot {k} at ({reg.knots[k, 0]:.6g}, {reg.knots[k, 1]:.6g}) "
                                f"lies outside region {reg.id}")
            if mask is not None:
                ocean = mask.is_ocean(reg.knots[:, 0], reg.knots[:, 1])
                for k in np.nonzero(~ocean)[0]:
                    problems.append(f"knot {k} of region {reg.id} on land at "
                                    f"({reg.knots[k, 0]:.6g}, {reg.knots[k, 1]:.6g})")
    return problems


def load_coarse_partition(path, mask: OceanMask | None = None) -> RegionTree:
    """Read and validate a partition-spec file (coarse, file-specified levels)."""
    header, blocks = parse_partition(Path(path).read_text(), str(path))
    tree = _tree_from_blocks(header, blocks, str(path))
    levels = range(1, tree.depth + 1)
    problems = check_nesting(tree, mask, range(1, tree.depth))
    if problems:
        raise PartitionError("; ".join(problems))
    problems = check_knots(tree, mask, levels)
    if problems:
        raise PartitionError("; ".join(problems))
    if tree.r is None:
        counts = {len(reg.knots) for reg in tree.levels[0]}
        tree.r = max(counts) if counts else 0
    return tree


# --------------------------------------------------------------- splitting


def _extent_km(poly, radius=EARTH_RADIUS_KM):
    x0, y0, x1, y1 = poly.bounds
    clat = math.cos(math.radians(0.5 * (y0 + y1)))
    k = math.pi * radius / 180.0
    return (x1 - x0) * clat * k, (y1 - y0) * k


def _bisect(poly, lon, lat, idx, rule="mean"):
    """Split ``poly`` (and observation indices ``idx``) across its longer extent.

    Returns ``[(poly_lo, idx_lo), (poly_hi, idx_hi)]`` or None when no split
    separates the observations. Points on the cut go to the low side.
    """
    x0, y0, x1, y1 = poly.bounds
    ew, ns = _extent_km(poly)
    axes = [0, 1] if ew >= ns else [1, 0]
    for axis in axes:
        coord = lon[idx] if axis == 0 else lat[idx]
        lo_b, hi_b = (x0, x1) if axis == 0 else (y0, y1)
        if rule == "mean" and len(idx):
            cut = float(np.mean(coord))
            if not (np.any(coord <= cut) and np.any(coord > cut)):
                continue
        else:
            cut = 0.5 * (lo_b + hi_b)
        pad = 1.0
        if axis == 0:
            lo_box = shapely_box(x0 - pad, y0 - pad, cut, y1 + pad)
            hi_box = shapely_box(cut, y0 - pad, x1 + pad, y1 + pad)
        else:
            lo_box = shapely_box(x0 - pad, y0 - pad, x1 + pad, cut)
            hi_box = shapely_box(x0 - pad, cut, x1 + pad, y1 + pad)
        low = coord <= cut
        return [(poly.intersection(lo_box), idx[low]), (poly.intersection(hi_box), idx[~low])]
    return None


def _pick_knots(rng, lon, lat, idx, r, exclude):
    cand = np.array([i for i in idx if i not in exclude], dtype=np.intp) if exclude else np.asarray(idx)
    if len(cand) > r:
        cand = np.sort(rng.choice(cand, r, replace=False))
    return cand


def auto_split(tree: RegionTree, lon, lat, threshold, r=None, seed=0, split_rule="mean") -> RegionTree:
    """Complete ``tree`` down to level ``tree.M`` from observation locations.

    Levels below the deepest file level and above M are binary splits with
    ``r`` knots drawn from contained observations; level-M leaves come from
    recursive bisection of each level-(M-1) region until every leaf holds
    fewer than ``threshold`` observations, and take the observations as knots.
    """
    if threshold < 1:
        raise PartitionError("threshold must be >= 1")
    tree = tree.copy()
    r = tree.r if r is None else r
    tree.r = r
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    rng = np.random.default_rng(seed)
    m0 = tree.depth
    if tree.M < m0:
        raise PartitionError(f"M={tree.M} is shallower than the file-specified {m0} levels")
    member = assign_observations(tree, lon, lat)
    if tree.M == m0:
        _set_leaf_knots(tree, lon, lat, member)
        return tree
    # observation indices and already-used knot indices per region at the deepest file level
    holds = [np.nonzero(member.level_index[:, m0 - 1] == reg.index)[0] for reg in tree.regions(m0)]
    # observations sitting on a file-level knot are not reused as auto knots
    used = []
    for reg, idx in zip(tree.regions(m0), holds):
        kset = {tuple(k) for k in reg.knots.tolist()}
        used.append({int(i) for i in idx if (lon[i], lat[i]) in kset})
    for m in range(m0 + 1, tree.M):
        new_regs, new_holds, new_used = [], [], []
        for parent, idx, u in zip(tree.regions(m - 1), holds, used):
            parts = _bisect(parent.boundary, lon, lat, idx, split_rule) or \
                _bisect(parent.boundary, lon, lat, idx, "midpoint")
            for poly, sub in parts:
                knots_idx = _pick_knots(rng, lon, lat, sub, r, u)
                reg = Region(m, len(new_regs), poly, parent.index, [],
                             np.column_stack([lon[knots_idx], lat[knots_idx]]), "auto")
                parent.children.append(reg.index)
                new_regs.append(reg)
                new_holds.append(sub)
                new_used.append(u | set(knots_idx.tolist()))
        tree.levels.append(new_regs)
        holds, used = new_holds, new_used
    leaves = []
    for parent, idx in zip(tree.regions(tree.M - 1), holds):
        for poly, sub in _split_until(parent.boundary, lon, lat, idx, threshold, parent.id, split_rule):
            reg = Region(tree.M, len(leaves), poly, parent.index, [],
                         np.column_stack([lon[sub], lat[sub]]), "auto")
            parent.children.append(reg.index)
            leaves.append(reg)
    tree.levels.append(leaves)
    return tree


def _split_until(poly, lon, lat, idx, threshold, rid, rule):
    if len(idx) < threshold:
        return [(poly, idx)]
    parts = _bisect(poly, lon, lat, idx, rule)
    if parts is None:
        raise PartitionError(f"cannot split region {rid}: {len(idx)} observations share one coordinate")
    out = []
    for p, sub in parts:
        out += _split_until(p, lon, lat, sub, threshold, rid, rule)
    return out


def _set_leaf_knots(tree, lon, lat, member):
    for reg in tree.leaves:
        sel = np.nonzero(member.leaf == reg.index)[0]
        reg.knots = np.column_stack([lon[sel], lat[sel]])


def single_region_tree(box: GeoBox, M, r, lon, lat, seed=0) -> RegionTree:
    """Coarse level made of one region covering ``box`` with ``r`` knots drawn from the data."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    poly = box.polygon()
    idx = np.nonzero(_covered(poly, lon, lat))[0]
    k = _pick_knots(np.random.default_rng(seed), lon, lat, idx, r, set())
    root = Region(1, 0, poly, None, [], np.column_stack([lon[k], lat[k]]), "auto")
    return RegionTree([[root]], M=M, r=r, J=2)


def regular_tree(box: GeoBox, M, r, lon, lat, seed=0, split_rule="midpoint") -> RegionTree:
    """Balanced binary tree over ``box`` (J=2 at every level, 2^(M-1) leaves).

    Non-leaf regions get ``r`` knots drawn from contained observations not
    already used as ancestor knots; leaves take their observations as knots.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    rng = np.random.default_rng(seed)
    root = Region(1, 0, box.polygon(), None, [], np.empty((0, 2)), "auto")
    levels = [[root]]
    idx_all = np.nonzero(_covered(root.boundary, lon, lat))[0]
    holds, used = [idx_all], [set()]
    for m in range(2, M + 1):
        regs, nh, nu = [], [], []
        for parent, idx, u in zip(levels[-1], holds, used):
            for poly, sub in _bisect(parent.boundary, lon, lat, idx, split_rule) or \
                    _bisect(parent.boundary, lon, lat, idx, "midpoint"):
                reg = Region(m, len(regs), poly, parent.index, [], np.empty((0, 2)), "auto")
                parent.children.append(reg.index)
                regs.append(reg)
                nh.append(sub)
                nu.append(set(u))
        levels.append(regs)
        holds, used = nh, nu
    tree = RegionTree(levels, M=M, r=r, J=2)
    # knots top-down, excluding ancestor knots
    used_by = {}
    member = assign_observations(tree, lon, lat)
    for m in range(1, M):
        for reg in tree.regions(m):
            anc_used = used_by.get((m - 1, reg.parent), set()) if m > 1 else set()
            sel = np.nonzero(member.level_index[:, m - 1] == reg.index)[0]
            k = _pick_knots(rng, lon, lat, sel, r, anc_used)
            reg.knots = np.column_stack([lon[k], lat[k]])
            used_by[(m, reg.index)] = anc_used | set(k.tolist())
    _set_leaf_knots(tree, lon, lat, member)
    return tree


# -------------------------------------------------------------- membership


@dataclass
class Membership:
    level_index: np.ndarray  # (n, depth) region index per level, -1 when rejected
    rejected: int

    @property
    def leaf(self):
        return self.level_index[:, -1]

    def counts(self, level, n_regions):
        li = self.level_index[:, level - 1]
        return np.bincount(li[li >= 0], minlength=n_regions)


def assign_observations(tree: RegionTree, lon, lat) -> Membership:
    """Route points down the tree; ties go to the lowest-index sibling."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    n = len(lon)
    out = np.full((n, tree.depth), -1, dtype=np.intp)
    pending = np.arange(n)
    for reg in tree.regions(1):
        hit = _covered(reg.boundary, lon[pending], lat[pending])
        out[pending[hit], 0] = reg.index
        pending = pending[~hit]
    for m in range(1, tree.depth):
        for reg in tree.regions(m):
            pending = np.nonzero(out[:, m - 1] == reg.index)[0]
            for c in reg.children:
                if len(pending) == 0:
                    break
                hit = _covered(tree.region(m + 1, c).boundary, lon[pending], lat[pending])
                out[pending[hit], m] = c
                pending = pending[~hit]
    bad = np.any(out < 0, axis=1)
    out[bad] = -1
    nrej = int(bad.sum())
    if nrej:
        logger.warning("%d points fall outside the region tree", nrej)
    return Membership(out, nrej)


def validate_tree(tree: RegionTree, mask: OceanMask | None = None, lon=None, lat=None, threshold=None):
    """Report-only audit of partition, knot and leaf-size invariants."""
    violations = []
    violations += check_nesting(tree, mask)
    violations += check_knots(tree, mask, range(1, tree.depth))
    report = {"levels": tree.depth, "M": tree.M,
              "knot_counts": {m: [len(reg.knots) for reg in tree.regions(m)] for m in range(1, tree.depth + 1)}}
    for m in range(1, tree.depth):
        for reg in tree.regions(m):
            if tree.r is not None and len(reg.knots) > tree.r:
                violations.append(f"region {reg.id} has {len(reg.knots)} knots > r={tree.r}")
    if lon is not None:
        member = assign_observations(tree, lon, lat)
        leaf_counts = member.counts(tree.depth, len(tree.leaves))
        report["max_leaf_size"] = int(leaf_counts.max()) if len(leaf_counts) else 0
        report["rejected"] = member.rejected
        for m in range(2, tree.depth + 1):
            li, lp = member.level_index[:, m - 1], member.level_index[:, m - 2]
            ok = li >= 0
            parents = np.array([reg.parent for reg in tree.regions(m)])
            if np.any(parents[li[ok]] != lp[ok]):
                violations.append(f"membership at level {m} inconsistent with parent chain")
    else:
        leaf_counts = np.array([len(reg.knots) for reg in tree.leaves])
        report["max_leaf_size"] = int(leaf_counts.max()) if len(leaf_counts) else 0
    if threshold is not None:
        for reg, c in zip(tree.leaves, leaf_counts):
            if c >= threshold:
                violations.append(f"leaf {reg.id} holds {c} observations >= threshold {threshold}")
    report["violations"] = violations
    return report
