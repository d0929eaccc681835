"""Workspace / joint-space set hierarchy on octrees.

Pipeline, all at one leaf resolution ``depth``:

* ``W``  workspace (interval bounds on the leg lengths, centre sampling at
  the finest level) over ``x, y in a1 +- rho_max`` and periodic ``phi``;
* ``S``  cells of ``W`` crossed by ``det A = 0``;
* aspects: components of ``W - S``;
* ``Q``  joint space over the limit box, and the thin set of joint cells
  crossed by the image of ``S`` (where the number of assembly modes jumps);
* joint cells: components of ``Q`` minus that thin set; every workspace cell
  of ``W - S`` gets as *key* the joint cell holding the image of its centre;
* characteristic cells: cells of an aspect whose key is undefined or changes
  across a face, plus cells holding other assembly modes of singular poses;
* basic regions, their joint-space images (pulled back from joint cell
  centres through the direct kinematics), coincidence classes and
  uniqueness domains.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from .kinematics import Geometry
from .octree import (
    EMPTY,
    FULL,
    MIXED,
    Box3,
    CellLabeling,
    Octree,
    build,
    components,
    morton_encode,
)

log = logging.getLogger(__name__)

CHUNK = 1 << 16


class SignInconsistency(RuntimeError):
    """An aspect holds cells of both signs of det(A); the depth is too low."""


class AmbiguousOverlap(RuntimeError):
    """Two basic components are neither coincident nor disjoint."""


@dataclass(frozen=True)
class AtlasConfig:
    depth: int = 7
    coincidence_tol: float = 0.05
    # components below this share of W (aspects) or Q (joint cells) are
    # boundary-layer debris, not sets of the hierarchy
    min_fraction: float = 2e-4
    # a component of an aspect minus its characteristic cells is a basic
    # region only if its image covers at least this share of its joint cell
    cover_tol: float = 0.5
    # straight runs of at most this many thin cells link two basic regions
    bridge_len: int = 3
    bridge_min: int = 4
    strict: bool = False

    def __post_init__(self):
        if not 3 <= self.depth <= 12:
            raise ValueError("depth must be in [3, 12]")


def workspace_box(g: Geometry) -> Box3:
    r = g.reach
    ax, ay = g.a1
    return Box3((ax - r, ay - r, -math.pi), (ax + r, ay + r, math.pi), (False, False, True))


def joint_box(g: Geometry) -> Box3:
    return Box3(g.rho_min, g.rho_max)


# --------------------------------------------------------------------------
# interval bounds

def _cos_range(a: np.ndarray, b: np.ndarray):
    """Min/max of cos over ``[a, b]`` (arrays, ``b - a <= 2 pi``)."""
    ca, cb = np.cos(a), np.cos(b)
    lo = np.minimum(ca, cb)
    hi = np.maximum(ca, cb)
    k = np.ceil(a / kin.TWO_PI)
    hi = np.where(k * kin.TWO_PI <= b, 1.0, hi)
    k = np.ceil((a - math.pi) / kin.TWO_PI)
    lo = np.where(math.pi + k * kin.TWO_PI <= b, -1.0, lo)
    return lo, hi


def _dist_range(px, py, xlo, xhi, ylo, yhi):
    """Min/max distance from point ``p`` to the axis-aligned rectangles."""
    dx = np.maximum(np.maximum(xlo - px, px - xhi), 0.0)
    dy = np.maximum(np.maximum(ylo - py, py - yhi), 0.0)
    fx = np.maximum(np.abs(xlo - px), np.abs(xhi - px))
    fy = np.maximum(np.abs(ylo - py), np.abs(yhi - py))
    return np.hypot(dx, dy), np.hypot(fx, fy)


def leg_length_bounds(g: Geometry, lo: np.ndarray, hi: np.ndarray):
    """Conservative ``(rho_lo, rho_hi)`` over pose boxes, each ``(N, 3)``."""
    b = g.platform
    rlo = np.empty((len(lo), 3))
    rhi = np.empty((len(lo), 3))
    for i in range(3):
        r = math.hypot(*b[i])
        alpha = math.atan2(b[i, 1], b[i, 0])
        if r == 0.0:
            ox_lo = ox_hi = oy_lo = oy_hi = 0.0
        else:
            clo, chi = _cos_range(lo[:, 2] + alpha, hi[:, 2] + alpha)
            slo, shi = _cos_range(lo[:, 2] + alpha - math.pi / 2, hi[:, 2] + alpha - math.pi / 2)
            ox_lo, ox_hi, oy_lo, oy_hi = r * clo, r * chi, r * slo, r * shi
        ax, ay = g.bases[i]
        rlo[:, i], rhi[:, i] = _dist_range(
            ax, ay, lo[:, 0] + ox_lo, hi[:, 0] + ox_hi, lo[:, 1] + oy_lo, hi[:, 1] + oy_hi
        )
    return rlo, rhi


def workspace_classifier(g: Geometry):
    mn, mx = np.asarray(g.rho_min), np.asarray(g.rho_max)

    def classify(lo, hi):
        rlo, rhi = leg_length_bounds(g, lo, hi)
        full = np.all((rlo >= mn) & (rhi <= mx), axis=1)
        empty = np.any((rhi < mn) | (rlo > mx), axis=1)
        return np.where(full, FULL, np.where(empty, EMPTY, MIXED))

    return classify


def joint_box_infeasible(g: Geometry, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """True where no joint vector of the box can close any pair of legs."""
    P = g.platform
    A = g.bases
    bad = np.zeros(len(lo), dtype=bool)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        side = float(np.linalg.norm(P[i] - P[j]))
        d = float(np.linalg.norm(A[i] - A[j]))
        dmin = np.maximum.reduce(
            [np.zeros(len(lo)), d - hi[:, i] - hi[:, j], lo[:, i] - hi[:, j] - d, lo[:, j] - hi[:, i] - d]
        )
        dmax = d + hi[:, i] + hi[:, j]
        bad |= (side < dmin) | (side > dmax)
    return bad


# --------------------------------------------------------------------------
# dense helpers

def _centers(box: Box3, depth: int, ijk: np.ndarray) -> np.ndarray:
    h = box.extent / float(1 << depth)
    return np.asarray(box.lo) + (ijk + 0.5) * h


def _flat_to_ijk(flat: np.ndarray, n: int) -> np.ndarray:
    return np.stack(np.unravel_index(flat, (n, n, n)), axis=1)


def dense_labels(lab: CellLabeling, mapping: np.ndarray | None = None) -> np.ndarray:
    """Per-voxel label grid (``-1`` outside), optionally remapped."""
    o = lab.octree
    n = 1 << o.depth
    out = np.full((n, n, n), -1, dtype=np.int32)
    if lab.count == 0:
        return out
    lvl, _ = o.leaves()
    per_leaf = lab.labels if mapping is None else np.asarray(mapping)[lab.labels]
    vals = np.repeat(per_leaf.astype(np.int32), np.int64(1) << (3 * (o.depth - lvl)))
    v = o.voxels()
    out[v[:, 0], v[:, 1], v[:, 2]] = vals
    return out


def _neighbors(arr: np.ndarray, axis: int, step: int, periodic: bool, fill):
    """``arr`` shifted so ``out[i] = arr[i + step]`` along ``axis``."""
    if periodic:
        return np.roll(arr, -step, axis=axis)
    out = np.full_like(arr, fill)
    n = arr.shape[axis]
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if step > 0:
        src[axis] = slice(step, n)
        dst[axis] = slice(0, n - step)
    else:
        src[axis] = slice(0, n + step)
        dst[axis] = slice(-step, n)
    out[tuple(dst)] = arr[tuple(src)]
    return out


# --------------------------------------------------------------------------
# builders

def build_workspace(g: Geometry, depth: int) -> Octree:
    if not 3 <= depth <= 12:
        raise ValueError("depth must be in [3, 12]")
    return build(workspace_box(g), workspace_classifier(g), depth)


def _det_sign_corners(g: Geometry, box: Box3, depth: int) -> np.ndarray:
    n = 1 << depth
    h = box.extent / n
    xs = box.lo[0] + h[0] * np.arange(n + 1)
    ys = box.lo[1] + h[1] * np.arange(n + 1)
    ps = box.lo[2] + h[2] * np.arange(n + 1)
    out = np.empty((n + 1, n + 1, n + 1), dtype=np.int8)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    for k, ph in enumerate(ps):
        P = np.stack([X.ravel(), Y.ravel(), np.full(X.size, ph)], axis=1)
        out[:, :, k] = np.sign(kin.det_a_batch(g, P)).reshape(n + 1, n + 1)
    return out


def _mark_roots(S: np.ndarray, box: Box3, depth: int, xs, ps, roots, ix_sets, ip_sets):
    n = 1 << depth
    hy = box.extent[1] / n
    for r in (roots[:, 0], roots[:, 1]):
        ok = np.isfinite(r)
        iy = np.floor((np.where(ok, r, box.lo[1]) - box.lo[1]) / hy).astype(np.int64)
        ok &= (iy >= 0) & (iy < n)
        for ix, ip in zip(ix_sets, ip_sets):
            good = ok & (ix >= 0) & (ix < n)
            S[ix[good], iy[good], ip[good] % n] = True


def singular_dense(g: Geometry, depth: int, workspace: Octree | None = None) -> np.ndarray:
    """Dense mask of workspace cells crossed by the type-2 singular surface."""
    box = workspace_box(g)
    n = 1 << depth
    W = (workspace if workspace is not None else build_workspace(g, depth)).to_dense()
    sg = _det_sign_corners(g, box, depth)
    S = np.zeros((n, n, n), dtype=bool)
    # sign change among the 8 corners
    ref = sg[:n, :n, :n]
    for di, dj, dk in itertools.product((0, 1), repeat=3):
        S |= sg[di : di + n, dj : dj + n, dk : dk + n] != ref
    S |= ref == 0
    # explicit y = s(x, phi) roots on corner lines and centre lines
    h = box.extent / n
    cx = box.lo[0] + h[0] * np.arange(n + 1)
    cp = box.lo[2] + h[2] * np.arange(n + 1)
    IX, IP = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    roots = kin.singular_y_batch(g, cx[IX.ravel()], cp[IP.ravel()])
    i, p = IX.ravel(), IP.ravel()
    _mark_roots(S, box, depth, cx, cp, roots, (i, i - 1, i, i - 1), (p, p, p - 1, p - 1))
    IX, IP = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    roots = kin.singular_y_batch(g, box.lo[0] + h[0] * (IX.ravel() + 0.5), box.lo[2] + h[2] * (IP.ravel() + 0.5))
    _mark_roots(S, box, depth, None, None, roots, (IX.ravel(),), (IP.ravel(),))
    return S & W


def build_singular_set(g: Geometry, depth: int, workspace: Octree | None = None) -> Octree:
    if not 3 <= depth <= 12:
        raise ValueError("depth must be in [3, 12]")
    return Octree.from_dense(workspace_box(g), singular_dense(g, depth, workspace))


@dataclass
class JointScan:
    """Direct kinematics at every joint cell centre."""

    depth: int
    counts: np.ndarray  # (n, n, n) int8
    solutions: np.ndarray  # (n**3, 6) flat workspace voxel index or -1
    signs: np.ndarray  # (n**3, 6) int8 sign of det A at each solution
    mixed: np.ndarray | None = None  # (n, n, n) bool, corner counts disagree


def corner_mixed(g: Geometry, depth: int) -> np.ndarray:
    """Joint voxels whose eight corners do not share one solution count.

    Catches layers of another count thinner than a voxel, which centre
    samples alone step over.
    """
    jb = joint_box(g)
    n = 1 << depth
    axes = [np.linspace(jb.lo[i], jb.hi[i], n + 1) for i in range(3)]
    jj, kk = np.meshgrid(axes[1], axes[2], indexing="ij")
    mixed = np.zeros((n, n, n), dtype=bool)
    prev = None
    for i in range(n + 1):
        q = np.stack([np.full(jj.size, axes[0][i]), jj.ravel(), kk.ravel()], axis=1)
        c = kin.dkp_count_batch(g, q).astype(np.int8).reshape(n + 1, n + 1)
        lo = np.minimum.reduce([c[:-1, :-1], c[1:, :-1], c[:-1, 1:], c[1:, 1:]])
        hi = np.maximum.reduce([c[:-1, :-1], c[1:, :-1], c[:-1, 1:], c[1:, 1:]])
        if prev is not None:
            plo, phi = prev
            mixed[i - 1] = np.minimum(lo, plo) != np.maximum(hi, phi)
        prev = (lo, hi)
    return mixed


def scan_joint_space(g: Geometry, depth: int, ws_depth: int | None = None) -> JointScan:
    jb = joint_box(g)
    wb = workspace_box(g)
    wd = depth if ws_depth is None else ws_depth
    n = 1 << depth
    nw = 1 << wd
    total = n**3
    counts = np.zeros(total, dtype=np.int8)
    sols = np.full((total, 6), -1, dtype=np.int32 if nw**3 < 2**31 else np.int64)
    signs = np.zeros((total, 6), dtype=np.int8)
    for s in range(0, total, CHUNK):
        flat = np.arange(s, min(s + CHUNK, total))
        q = _centers(jb, depth, _flat_to_ijk(flat, n))
        poses, cnt = kin.solve_dkp_batch(g, q, polish=False, merge_tol=1e-9)
        counts[flat] = cnt
        P = poses.reshape(-1, 3)
        ok = np.isfinite(P[:, 0])
        Pz = np.nan_to_num(P)
        ijk = wb.voxel_index(Pz, wd)
        inb = ok & np.all((ijk >= 0) & (ijk < nw), axis=1)
        code = np.where(inb, np.ravel_multi_index(tuple(np.clip(ijk, 0, nw - 1).T), (nw,) * 3), -1)
        sols[flat] = code.reshape(-1, 6)
        sg = np.zeros(len(P), dtype=np.int8)
        if ok.any():
            sg[ok] = np.sign(kin.det_a_batch(g, P[ok]))
        signs[flat] = sg.reshape(-1, 6)
    return JointScan(depth, counts.reshape(n, n, n), sols, signs, corner_mixed(g, depth))


def _joint_octree(g: Geometry, depth: int, counts: np.ndarray) -> Octree:
    n = 1 << depth
    jb = joint_box(g)
    ext = jb.extent
    blo = np.asarray(jb.lo)

    def classify(lo, hi):
        point = np.all(lo == hi, axis=1)
        st = np.where(joint_box_infeasible(g, lo, hi), EMPTY, MIXED)
        if point.any():
            ijk = np.clip(np.floor((lo[point] - blo) / ext * n).astype(np.int64), 0, n - 1)
            st[point] = np.where(counts[ijk[:, 0], ijk[:, 1], ijk[:, 2]] > 0, FULL, EMPTY)
        return st

    return build(jb, classify, depth)


def build_joint_space(g: Geometry, depth: int, scan: JointScan | None = None) -> Octree:
    if not 3 <= depth <= 12:
        raise ValueError("depth must be in [3, 12]")
    if scan is None:
        scan = scan_joint_space(g, depth)
    return _joint_octree(g, depth, scan.counts)


# --------------------------------------------------------------------------
# atlas

@dataclass
class Aspect:
    id: int
    octree: Octree
    sign: int
    volume: float


@dataclass
class BasicRegion:
    id: int
    aspect: int
    joint_cell: int
    octree: Octree
    volume: float
    coverage: float = 0.0


@dataclass
class CoincidenceClass:
    id: int
    members: list[int]
    joint_cell: int

    @property
    def multiplicity(self) -> int:
        return len(self.members)


@dataclass
class UniquenessDomain:
    id: int
    aspect: int
    regions: list[int]
    octree: Octree


@dataclass
class RegionAtlas:
    geometry: Geometry
    config: AtlasConfig
    workspace: Octree | None = None
    joint_space: Octree | None = None
    singular_set: Octree | None = None
    aspects: list[Aspect] = field(default_factory=list)
    aspect_fragments: Octree | None = None
    joint_cells: list[dict] = field(default_factory=list)
    joint_thin: Octree | None = None
    characteristic: dict[int, Octree] = field(default_factory=dict)
    basic_regions: list[BasicRegion] = field(default_factory=list)
    region_fragments: dict[int, Octree] = field(default_factory=dict)
    raw_region_count: int = 0
    basic_components: list[Octree] = field(default_factory=list)
    overlap: np.ndarray | None = None
    coincidence_classes: list[CoincidenceClass] = field(default_factory=list)
    ambiguous_pairs: list[tuple[int, int]] = field(default_factory=list)
    region_adjacency: dict[tuple[int, int], int] = field(default_factory=dict)
    uniqueness_domains: list[UniquenessDomain] = field(default_factory=list)
    seed_hits: np.ndarray | None = None
    _grid: dict = field(default_factory=dict, repr=False)

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def wbox(self) -> Box3:
        return workspace_box(self.geometry)

    @property
    def jbox(self) -> Box3:
        return joint_box(self.geometry)

    # lookups -----------------------------------------------------------------
    def _voxel_flat(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = 1 << self.depth
        ijk = self.wbox.voxel_index(X, self.depth)
        ok = np.all((ijk >= 0) & (ijk < n), axis=1) & self.wbox.inside(X)
        flat = np.ravel_multi_index(tuple(np.clip(ijk, 0, n - 1).T), (n,) * 3)
        return flat, ok

    def _lookup(self, name: str, X) -> np.ndarray:
        grid = self._grid[name]
        flat, ok = self._voxel_flat(X)
        out = grid.ravel()[flat].astype(np.int64)
        out[~ok] = -1
        return out

    def aspect_of(self, X) -> np.ndarray:
        return self._lookup("aspect", X)

    def region_of(self, X) -> np.ndarray:
        return self._lookup("region", X)

    def joint_cell_of(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        n = 1 << self.depth
        ijk = self.jbox.voxel_index(q, self.depth)
        ok = np.all((ijk >= 0) & (ijk < n), axis=1) & self.jbox.inside(q)
        ijk = np.clip(ijk, 0, n - 1)
        out = self._grid["jcell"][ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(np.int64)
        out[~ok] = -1
        return out

    def class_of_region(self, r: int) -> CoincidenceClass | None:
        for c in self.coincidence_classes:
            if r in c.members:
                return c
        return None


def compute_aspects(atlas: RegionAtlas) -> list[Aspect]:
    """Components of ``W - S`` labelled by the sign of ``det A``."""
    g, cfg = atlas.geometry, atlas.config
    if atlas.workspace is None:
        atlas.workspace = build_workspace(g, cfg.depth)
    if atlas.singular_set is None:
        atlas.singular_set = build_singular_set(g, cfg.depth, atlas.workspace)
    free = atlas.workspace.difference(atlas.singular_set)
    lab = components(free)
    sizes = lab.sizes()
    keep = sizes >= cfg.min_fraction * max(atlas.workspace.n_voxels, 1)
    lvl, code = free.leaves()
    lo, hi = free.cell_bounds(lvl, code)
    cen = 0.5 * (lo + hi)
    aspects = []
    mapping = np.full(lab.count, -1, dtype=np.int64)
    rng = np.random.default_rng(0)
    for k in np.nonzero(keep)[0]:
        idx = np.nonzero(lab.labels == k)[0]
        pick = idx if len(idx) <= 4000 else rng.choice(idx, 4000, replace=False)
        s = np.sign(kin.det_a_batch(g, cen[pick]))
        pos, neg = int(np.sum(s > 0)), int(np.sum(s < 0))
        if pos and neg:
            raise SignInconsistency(f"component {k} has {pos} positive and {neg} negative samples")
        mapping[k] = len(aspects)
        oc = lab.component(int(k))
        aspects.append(Aspect(len(aspects), oc, 1 if pos else -1, oc.volume()))
    atlas.aspects = aspects
    frag_lvl = lab.labels[mapping[lab.labels] < 0] if lab.count else np.zeros(0, np.int64)
    m = mapping[lab.labels] < 0 if lab.count else np.zeros(0, bool)
    atlas.aspect_fragments = Octree.from_leaves(free.box, free.depth, lvl[m], code[m])
    atlas._grid["aspect"] = dense_labels(lab, mapping)
    del frag_lvl
    return aspects


def _singular_seeds(atlas: RegionAtlas):
    """Exactly singular poses, one per singular cell, on the explicit surface."""
    g = atlas.geometry
    S = atlas.singular_set
    ijk = S.voxels()
    if len(ijk) == 0:
        return np.zeros((0, 3)), ijk
    c = _centers(atlas.wbox, atlas.depth, ijk)
    hy = atlas.wbox.extent[1] / (1 << atlas.depth)
    roots = kin.singular_y_batch(g, c[:, 0], c[:, 2])
    dist = np.abs(roots - c[:, 1:2])
    dist = np.where(np.isfinite(dist), dist, np.inf)
    best = np.argmin(dist, axis=1)
    y = roots[np.arange(len(c)), best]
    ok = dist[np.arange(len(c)), best] <= hy
    Xs = np.stack([c[:, 0], y, c[:, 2]], axis=1)[ok]
    return Xs, ijk[ok]


def compute_characteristic_surfaces(atlas: RegionAtlas, g: Geometry | None = None):
    """Thin per-aspect sets of cells sharing joint vectors with singular poses."""
    g = g or atlas.geometry
    cfg = atlas.config
    D = cfg.depth
    n = 1 << D
    if not atlas.aspects:
        compute_aspects(atlas)
    asp = atlas._grid["aspect"]
    scan = atlas._grid.get("scan")
    if scan is None:
        scan = scan_joint_space(g, D)
        atlas._grid["scan"] = scan
    if atlas.joint_space is None:
        atlas.joint_space = _joint_octree(g, D, scan.counts)
    counts = scan.counts.astype(np.int16)
    jbox = atlas.jbox

    # seed replay: other assembly modes of exactly singular poses
    Xs, _ = _singular_seeds(atlas)
    qs = kin.inverse_kinematics_batch(g, Xs) if len(Xs) else np.zeros((0, 3))
    inq = kin.within_limits_batch(g, qs) if len(qs) else np.zeros(0, bool)
    Xs, qs = Xs[inq], qs[inq]
    seed_marks = np.zeros((n, n, n), dtype=bool)
    hits = []
    wext = atlas.wbox.extent
    excl = 2.0 * math.sqrt(3.0) / n
    for s in range(0, len(qs), CHUNK // 4):
        poses, cnt = kin.solve_dkp_batch(g, qs[s : s + CHUNK // 4])
        for j in range(6):
            P = poses[:, j]
            ok = np.isfinite(P[:, 0])
            d = (P - Xs[s : s + CHUNK // 4]) / wext
            d[:, 2] = kin.wrap_angle(d[:, 2] * kin.TWO_PI) / kin.TWO_PI
            ok &= np.linalg.norm(np.nan_to_num(d, nan=1.0), axis=1) > excl
            if not ok.any():
                continue
            P = P[ok]
            flat, inb = atlas._voxel_flat(P)
            a = np.where(inb, asp.ravel()[flat], -1)
            good = a >= 0
            seed_marks.ravel()[flat[good]] = True
            hits.append(np.concatenate([P[good], qs[s : s + CHUNK // 4][ok][good]], axis=1))
    atlas.seed_hits = np.concatenate(hits) if hits else np.zeros((0, 6))

    # joint thin set: both sides of every count jump, voxels with mixed
    # corner counts, plus seed images
    thin = np.zeros((n, n, n), dtype=bool) if scan.mixed is None else scan.mixed.copy()
    for ax in range(3):
        for st in (1, -1):
            nb = _neighbors(counts, ax, st, False, -1)
            thin |= (nb >= 0) & (nb != counts)
    if len(qs):
        qi = np.clip(jbox.voxel_index(qs, D), 0, n - 1)
        thin[qi[:, 0], qi[:, 1], qi[:, 2]] = True
    Qd = atlas.joint_space.to_dense()
    thin &= Qd
    atlas.joint_thin = Octree.from_dense(jbox, thin)
    cells_oct = atlas.joint_space.difference(atlas.joint_thin)
    jl = components(cells_oct)
    jsz = jl.sizes()
    keep = jsz >= cfg.min_fraction * max(atlas.joint_space.n_voxels, 1)
    jmap = np.full(jl.count, -1, dtype=np.int64)
    jmap[keep] = np.arange(int(keep.sum()))
    jcell = dense_labels(jl, jmap)
    atlas._grid["jcell"] = jcell
    atlas.joint_cells = []
    for k in np.nonzero(keep)[0]:
        vox = jl.component(int(k)).voxels()[:1]
        atlas.joint_cells.append(
            {
                "id": int(jmap[k]),
                "voxels": int(jsz[k]),
                "volume": float(jsz[k] * cells_oct.voxel_volume),
                "count": int(scan.counts[vox[0, 0], vox[0, 1], vox[0, 2]]),
            }
        )

    # workspace keys
    key = np.full((n, n, n), -1, dtype=np.int32)
    free = asp >= 0
    flat = np.nonzero(free.ravel())[0]
    for s in range(0, len(flat), CHUNK):
        f = flat[s : s + CHUNK]
        X = _centers(atlas.wbox, D, _flat_to_ijk(f, n))
        q = kin.inverse_kinematics_batch(g, X)
        qi = np.clip(jbox.voxel_index(q, D), 0, n - 1)
        key.ravel()[f] = jcell[qi[:, 0], qi[:, 1], qi[:, 2]]
    atlas._grid["key"] = key

    per = atlas.wbox.periodic
    mark = free & (key < 0)
    for ax in range(3):
        for st in (1, -1):
            nk = _neighbors(key, ax, st, per[ax], -1)
            na = _neighbors(asp, ax, st, per[ax], -1)
            mark |= free & (na == asp) & (nk >= 0) & (key >= 0) & (nk != key) & (key > nk)
    mark |= seed_marks & free
    atlas._grid["thin"] = mark
    out = {}
    for a in atlas.aspects:
        out[a.id] = Octree.from_dense(atlas.wbox, mark & (asp == a.id))
    atlas.characteristic = out
    return out


def compute_basic_regions(atlas: RegionAtlas):
    """Components of each aspect minus its characteristic cells.

    A component counts as a basic region when its image covers at least
    ``cover_tol`` of the joint cell it is keyed to; smaller pieces are
    boundary-layer debris and are kept apart in ``region_fragments``.
    """
    if not atlas.characteristic:
        compute_characteristic_surfaces(atlas)
    cfg = atlas.config
    n = 1 << cfg.depth
    key = atlas._grid["key"]
    comps = []  # (aspect, octree)
    for a in atlas.aspects:
        rest = a.octree.difference(atlas.characteristic[a.id])
        lab = components(rest)
        for k in range(lab.count):
            comps.append((a.id, lab.component(k)))
    atlas.raw_region_count = len(comps)
    lab_grid = np.full((n, n, n), -1, dtype=np.int32)
    cand = []
    for a_id, oc in comps:
        v = oc.voxels()
        keys = key[v[:, 0], v[:, 1], v[:, 2]]
        vals, cnt = np.unique(keys, return_counts=True)
        if len(vals) > 1:
            log.warning("component with %d distinct joint-cell keys", len(vals))
        lab_grid[v[:, 0], v[:, 1], v[:, 2]] = len(cand)
        cand.append((a_id, int(vals[np.argmax(cnt)]), oc))
    sign = np.array([atlas.aspects[c[0]].sign for c in cand], dtype=np.int8)
    ckey = np.array([c[1] for c in cand], dtype=np.int64)
    labs = fiber_labels(atlas, lab_grid, ckey, sign)
    cover = _cell_hits(atlas, labs, ckey) / np.maximum(
        [atlas.joint_cells[k]["voxels"] for k in ckey] if len(cand) else [], 1
    )
    regions = []
    frag = {a.id: [] for a in atlas.aspects}
    for c, (a_id, k, oc) in enumerate(cand):
        if cover[c] >= cfg.cover_tol:
            regions.append(BasicRegion(len(regions), a_id, k, oc, oc.volume()))
        else:
            frag[a_id].append(oc)
    atlas.basic_regions = regions
    atlas.region_fragments = {
        a: _union_all(parts, atlas.wbox, cfg.depth) for a, parts in frag.items()
    }
    grid = np.full((n, n, n), -1, dtype=np.int32)
    for r in regions:
        v = r.octree.voxels()
        grid[v[:, 0], v[:, 1], v[:, 2]] = r.id
    atlas._grid["region"] = grid
    rsign = np.array([atlas.aspects[r.aspect].sign for r in regions], dtype=np.int8)
    rkey = np.array([r.joint_cell for r in regions], dtype=np.int64)
    labs = fiber_labels(atlas, grid, rkey, rsign)
    hits = _cell_hits(atlas, labs, rkey)
    for r in regions:
        r.coverage = float(hits[r.id] / max(atlas.joint_cells[r.joint_cell]["voxels"], 1))
    atlas._grid["fiber_labels"] = labs
    return regions


def _union_all(parts, box, depth):
    out = Octree.empty(box, depth)
    for p in parts:
        out = out.union(p)
    return out


def _offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    off = off[np.any(off != 0, axis=1)]
    order = np.lexsort((np.abs(off).sum(axis=1), np.abs(off).max(axis=1)))
    return off[order]


def fiber_labels(atlas: RegionAtlas, lab_grid, lab_key, lab_sign, radius: int = 2) -> np.ndarray:
    """Region label of every assembly mode of every joint cell centre.

    A mode inside a labelled workspace voxel of its own det-A sign takes
    that label.  A mode in an unlabelled voxel (characteristic or boundary
    layer, outside the centre-sampled workspace) takes the nearest label
    within ``radius`` voxels whose aspect sign matches and whose region is
    keyed to the joint cell of the centre.  Duplicates within a fibre are
    dropped; ``-1`` marks unattributed modes.
    """
    scan = atlas._grid["scan"]
    n = 1 << atlas.depth
    flat_lab = lab_grid.ravel()
    lab_key = np.asarray(lab_key, dtype=np.int64)
    K = len(lab_key)
    key_ext = np.r_[lab_key, -2]
    sign_ext = np.r_[np.asarray(lab_sign, dtype=np.int8), 0].astype(np.int8)
    jc = atlas._grid["jcell"].ravel()
    per = atlas.wbox.periodic
    offsets = _offsets(radius)
    labs = np.full(scan.solutions.shape, -1, dtype=np.int32)
    for slot in range(scan.solutions.shape[1]):
        sol = scan.solutions[:, slot]
        sg = scan.signs[:, slot]
        has = sol >= 0
        col = np.full(len(sol), K, dtype=np.int32)
        col[has] = flat_lab[sol[has]]
        col[col < 0] = K
        col[has & (sign_ext[col] != sg)] = K
        rows = np.nonzero((col == K) & has & (jc >= 0))[0]
        want_key = jc[rows]
        want_sign = sg[rows]
        ijk = np.stack(np.unravel_index(sol[rows], (n, n, n)), axis=1)
        todo = np.arange(len(rows))
        for off in offsets:
            if len(todo) == 0:
                break
            u = ijk[todo] + off
            ok = np.ones(len(todo), dtype=bool)
            for ax in range(3):
                if per[ax]:
                    u[:, ax] %= n
                else:
                    ok &= (u[:, ax] >= 0) & (u[:, ax] < n)
            lab = np.full(len(todo), K, dtype=np.int64)
            lab[ok] = flat_lab[np.ravel_multi_index(tuple(u[ok].T), (n, n, n))]
            lab[lab < 0] = K
            hit = (key_ext[lab] == want_key[todo]) & (sign_ext[lab] == want_sign[todo])
            col[rows[todo[hit]]] = lab[hit]
            todo = todo[~hit]
        col[col == K] = -1
        labs[:, slot] = col
    labs.sort(axis=1)
    dup = np.zeros(labs.shape, dtype=bool)
    dup[:, 1:] = (labs[:, 1:] == labs[:, :-1]) & (labs[:, 1:] >= 0)
    labs[dup] = -1
    return labs


def _cell_hits(atlas: RegionAtlas, labs: np.ndarray, lab_key) -> np.ndarray:
    """Per label, number of centres of its own joint cell inside its image."""
    lab_key = np.asarray(lab_key, dtype=np.int64)
    K = len(lab_key)
    jc = atlas._grid["jcell"].ravel()
    hits = np.zeros(max(K, 1), dtype=np.int64)
    for slot in range(labs.shape[1]):
        v = labs[:, slot]
        m = v >= 0
        vv = v[m]
        own = jc[m] == lab_key[vv]
        hits += np.bincount(vv[own], minlength=max(K, 1))
    return hits[:K].astype(float)


def compute_basic_components(atlas: RegionAtlas, g: Geometry | None = None):
    """Images of basic regions, pairwise overlaps and coincidence classes."""
    if not atlas.basic_regions and atlas.raw_region_count == 0:
        compute_basic_regions(atlas)
    cfg = atlas.config
    D = cfg.depth
    n = 1 << D
    lab = atlas._grid["fiber_labels"]
    R = len(atlas.basic_regions)
    inside = atlas._grid["jcell"].ravel() >= 0
    M = np.zeros((R + 1, R + 1), dtype=np.int64)
    # overlaps are measured on the joint cells; the thin set around the
    # singular image is where distinct images legitimately touch
    cols = [np.where(lab[inside, a] >= 0, lab[inside, a], R).astype(np.int32) for a in range(6)]
    for a, b in itertools.combinations_with_replacement(range(6), 2):
        idx = cols[a].astype(np.int64) * (R + 1) + cols[b]
        M += np.bincount(idx, minlength=(R + 1) ** 2).reshape(R + 1, R + 1)
    del cols
    M = M[:R, :R]
    M = M + M.T - np.diag(np.diag(M))
    atlas.overlap = M
    vol = np.diag(M).astype(float)
    images = []
    for r in range(R):
        rows = np.nonzero(np.any(lab == r, axis=1))[0]
        images.append(Octree.from_voxels(atlas.jbox, D, _flat_to_ijk(rows, n)))
    atlas.basic_components = images
    # coincident / disjoint dichotomy
    parent = list(range(R))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    ambiguous = []
    for i, j in itertools.combinations(range(R), 2):
        small = max(min(vol[i], vol[j]), 1.0)
        inter = M[i, j]
        sym = vol[i] + vol[j] - 2 * inter
        if sym < cfg.coincidence_tol * small:
            parent[find(i)] = find(j)
        elif inter < cfg.coincidence_tol * small:
            pass
        else:
            ambiguous.append((i, j))
    atlas.ambiguous_pairs = ambiguous
    if ambiguous and cfg.strict:
        raise AmbiguousOverlap(f"{len(ambiguous)} ambiguous pairs, first {ambiguous[0]}")
    groups: dict[int, list[int]] = {}
    for r in range(R):
        groups.setdefault(find(r), []).append(r)
    classes = []
    for members in sorted(groups.values(), key=lambda m: m[0]):
        cells = [atlas.basic_regions[r].joint_cell for r in members]
        classes.append(CoincidenceClass(len(classes), members, max(set(cells), key=cells.count)))
    atlas.coincidence_classes = classes
    return images, classes


def region_adjacency(atlas: RegionAtlas) -> dict[tuple[int, int], int]:
    """Pairs of basic regions of one aspect facing each other across thin cells.

    Counts straight axis-aligned runs of at most ``bridge_len`` cells of the
    aspect's characteristic set (or debris) that join two distinct regions.
    """
    cfg = atlas.config
    grid = atlas._grid["region"]
    asp = atlas._grid["aspect"]
    thin = (asp >= 0) & (grid < 0)
    per = atlas.wbox.periodic
    R = len(atlas.basic_regions)
    counts = np.zeros((R, R), dtype=np.int64)
    region_aspect = np.array([r.aspect for r in atlas.basic_regions] + [-2])
    for ax in range(3):
        run = np.ones_like(thin)
        for d in range(1, cfg.bridge_len + 1):
            run &= _neighbors(thin, ax, d, per[ax], False)
            far = _neighbors(grid, ax, d + 1, per[ax], -1)
            # every cell strictly between is thin and of the same aspect
            same = _neighbors(asp, ax, d, per[ax], -1) == asp
            m = (grid >= 0) & run & (far >= 0) & (far != grid) & same
            if not m.any():
                continue
            a, b = grid[m], far[m]
            ok = region_aspect[a] == region_aspect[b]
            idx = np.minimum(a, b)[ok] * R + np.maximum(a, b)[ok]
            counts += np.bincount(idx, minlength=R * R).reshape(R, R)
    adj = {}
    for i, j in zip(*np.nonzero(counts)):
        if counts[i, j] >= cfg.bridge_min:
            adj[(int(i), int(j))] = int(counts[i, j])
    atlas.region_adjacency = adj
    return adj


def _disjoint(atlas: RegionAtlas, i: int, j: int) -> bool:
    M = atlas.overlap
    small = max(min(M[i, i], M[j, j]), 1)
    return M[i, j] < atlas.config.coincidence_tol * small


def _min_partition(nodes: list[int], adj: set[tuple[int, int]], ok) -> list[list[int]]:
    """Fewest connected, pairwise-compatible groups covering ``nodes``."""
    nodes = sorted(nodes)
    nb = {v: set() for v in nodes}
    for a, b in adj:
        if a in nb and b in nb:
            nb[a].add(b)
            nb[b].add(a)

    def connected(group):
        group = set(group)
        start = next(iter(group))
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for w in nb[v] & group:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen == group

    # BFS order keeps partial groups near-connected
    order = []
    for root in nodes:
        if root in order:
            continue
        queue = [root]
        while queue:
            v = queue.pop(0)
            if v in order:
                continue
            order.append(v)
            queue.extend(sorted(nb[v] - set(order)))
    best: list[list[int]] | None = None

    def rec(i, groups):
        nonlocal best
        if best is not None and len(groups) >= len(best):
            return
        if i == len(order):
            if all(connected(gp) for gp in groups):
                best = [sorted(gp) for gp in groups]
            return
        v = order[i]
        for gp in groups:
            if all(ok(v, w) for w in gp) and (nb[v] & set(gp) or True):
                gp.append(v)
                rec(i + 1, groups)
                gp.pop()
        groups.append([v])
        rec(i + 1, groups)
        groups.pop()

    rec(0, [])
    return best or [[v] for v in nodes]


def _drop_conflicting(atlas: RegionAtlas, member: np.ndarray, sep: np.ndarray) -> np.ndarray:
    """Leave out bridge cells sharing a joint vector with another pose of the domain.

    Each cell is probed at its centre and eight interior points.
    """
    g = atlas.geometry
    n = 1 << atlas.depth
    flat = np.nonzero(sep.ravel())[0]
    if len(flat) == 0:
        return sep
    C = _centers(atlas.wbox, atlas.depth, _flat_to_ijk(flat, n))
    h = atlas.wbox.extent / n
    probes = [np.zeros(3)] + [0.25 * h * np.array(s) for s in itertools.product((-1, 1), repeat=3)]
    inside = (member | sep).ravel()
    excl = math.sqrt(3.0) / n
    bad = np.zeros(len(flat), dtype=bool)
    for off in probes:
        X = C + off
        poses, _ = kin.solve_dkp_batch(g, kin.inverse_kinematics_batch(g, X))
        for j in range(poses.shape[1]):
            P = poses[:, j]
            ok = np.isfinite(P[:, 0])
            d = (np.nan_to_num(P) - X) / atlas.wbox.extent
            d[:, 2] = kin.wrap_angle(d[:, 2] * kin.TWO_PI) / kin.TWO_PI
            ok &= np.linalg.norm(d, axis=1) > excl
            f, inb = atlas._voxel_flat(np.nan_to_num(P))
            bad |= ok & inb & inside[f]
    out = sep.copy()
    out.ravel()[flat[bad]] = False
    return out


def compute_uniqueness_domains(atlas: RegionAtlas) -> list[UniquenessDomain]:
    """Fewest unions of adjacent basic regions with pairwise-disjoint images."""
    if atlas.overlap is None:
        compute_basic_components(atlas)
    adj = region_adjacency(atlas)
    grid = atlas._grid["region"]
    asp = atlas._grid["aspect"]
    cfg = atlas.config
    per = atlas.wbox.periodic
    domains = []
    for a in atlas.aspects:
        nodes = [r.id for r in atlas.basic_regions if r.aspect == a.id]
        if not nodes:
            continue
        groups = _min_partition(nodes, set(adj), lambda i, j: _disjoint(atlas, i, j))
        for gp in sorted(groups, key=lambda x: x[0]):
            member = np.isin(grid, gp)
            # thin cells on bridges between two members belong to the domain
            thin = (asp == a.id) & (grid < 0)
            sep = np.zeros_like(thin)
            for ax in range(3):
                for st in (1, -1):
                    for d in range(1, cfg.bridge_len + 1):
                        near = _neighbors(member, ax, -st * d, per[ax], False)
                        far = np.zeros_like(thin)
                        for e in range(1, cfg.bridge_len + 1):
                            far |= _neighbors(member, ax, st * e, per[ax], False)
                        sep |= thin & near & far
            sep = _drop_conflicting(atlas, member, sep)
            oc = Octree.from_dense(atlas.wbox, member | sep)
            domains.append(UniquenessDomain(len(domains), a.id, gp, oc))
    atlas.uniqueness_domains = domains
    return domains


def dkp_multiplicity_map(atlas: RegionAtlas, g: Geometry | None = None, samples: int = 2000, seed: int = 0) -> dict:
    """Histogram of assembly-mode counts over uniform samples of ``Q``.

    Samples falling in the joint thin set (boundary layer of the singular
    image) are skipped.  When coincidence classes exist, each sample's
    count is compared to the multiplicity of the class of its joint cell.
    """
    g = g or atlas.geometry
    if atlas.joint_space is None:
        scan = atlas._grid.get("scan") or scan_joint_space(g, atlas.depth)
        atlas._grid["scan"] = scan
        atlas.joint_space = _joint_octree(g, atlas.depth, scan.counts)
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(g.rho_min), np.asarray(g.rho_max)
    got = []
    tries = 0
    while sum(len(x) for x in got) < samples and tries < 200:
        tries += 1
        q = rng.uniform(lo, hi, size=(max(samples, 256), 3))
        keep = atlas.joint_space.contains_points(q)
        if atlas.joint_thin is not None:
            keep &= ~atlas.joint_thin.contains_points(q)
        got.append(q[keep])
    q = np.concatenate(got)[:samples]
    _, cnt = kin.solve_dkp_batch(g, q)
    hist = {int(k): int(v) for k, v in zip(*np.unique(cnt, return_counts=True))}
    result = {"samples": len(q), "histogram": hist, "q": q, "counts": cnt}
    if atlas.coincidence_classes and "jcell" in atlas._grid:
        by_cell: dict[int, int] = {}
        for c in atlas.coincidence_classes:
            by_cell[c.joint_cell] = max(by_cell.get(c.joint_cell, 0), c.multiplicity)
        cells = atlas.joint_cell_of(q)
        exp = np.array([by_cell.get(int(c), -1) for c in cells])
        known = exp >= 0
        result["class_checked"] = int(known.sum())
        result["class_agree"] = int(np.sum(exp[known] == cnt[known]))
    return result


def build_atlas(g: Geometry, config: AtlasConfig | None = None, stage: str = "domains") -> RegionAtlas:
    """Run the pipeline up to ``stage`` (aspects, characteristic, regions, components, domains)."""
    cfg = config or AtlasConfig()
    atlas = RegionAtlas(g, cfg)
    stages = ["aspects", "characteristic", "regions", "components", "domains"]
    if stage not in stages:
        raise ValueError(f"unknown stage {stage!r}")
    upto = stages.index(stage)
    log.info("workspace / singular set / aspects at depth %d", cfg.depth)
    compute_aspects(atlas)
    if upto >= 1:
        log.info("joint space scan and characteristic cells")
        compute_characteristic_surfaces(atlas, g)
    if upto >= 2:
        compute_basic_regions(atlas)
    if upto >= 3:
        compute_basic_components(atlas, g)
    if upto >= 4:
        compute_uniqueness_domains(atlas)
    return atlas
