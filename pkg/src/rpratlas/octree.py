"""Linear octrees over an axis-aligned 3D box.

An octree of maximum depth ``D`` is stored as the set of its FULL voxels at
the finest level, written as sorted, disjoint, non-touching half-open
intervals of Morton codes.  Every aligned Morton block is an octree node, so
the canonical (normalized) tree is recovered by splitting the intervals into
maximal aligned blocks: those are the FULL leaves, and a node is MIXED iff
it partially overlaps the intervals.  Two octrees are structurally equal iff
their interval arrays are equal.

Morton layout: bit ``b`` of the axis-0 index lands at position ``3b + 2``,
axis 1 at ``3b + 1`` and axis 2 at ``3b``, so child ``(i, j, k)`` of
a node with code ``c`` has code ``8c + (i << 2 | j << 1 | k)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

EMPTY, FULL, MIXED = 0, 1, 2
MAX_DEPTH = 12

Classifier = Callable[[np.ndarray, np.ndarray], np.ndarray]


class OctreeError(ValueError):
    pass


class EmptyCellError(OctreeError):
    """A query point does not lie in a FULL leaf."""


@dataclass(frozen=True)
class Box3:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    periodic: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        per = tuple(bool(v) for v in self.periodic)
        if len(lo) != 3 or len(hi) != 3 or len(per) != 3:
            raise OctreeError("Box3 needs three axes")
        if not all(a < b for a, b in zip(lo, hi)):
            raise OctreeError(f"degenerate box {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "periodic", per)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def voxel_index(self, points, depth: int) -> np.ndarray:
        """Integer voxel coordinates at ``depth``.

        Periodic axes wrap; other axes may fall outside ``[0, 2**depth)``.
        Rows with a non-finite coordinate map to ``-1`` on every axis.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = 1 << depth
        rel = (p - np.asarray(self.lo)) / self.extent
        bad = ~np.all(np.isfinite(rel), axis=1)
        idx = np.floor(np.where(bad[:, None], -1.0, rel * n)).astype(np.int64)
        for a in range(3):
            if self.periodic[a]:
                idx[:, a] %= n
        idx[bad] = -1
        return idx

    def inside(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.ones(len(p), dtype=bool)
        for a in range(3):
            if not self.periodic[a]:
                ok &= (p[:, a] >= self.lo[a]) & (p[:, a] <= self.hi[a])
        return ok


# --------------------------------------------------------------------------
# Morton codes

def morton_encode(ijk: np.ndarray, depth: int) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    code = np.zeros(len(ijk), dtype=np.int64)
    for b in range(depth):
        code |= ((ijk[:, 0] >> b) & 1) << (3 * b + 2)
        code |= ((ijk[:, 1] >> b) & 1) << (3 * b + 1)
        code |= ((ijk[:, 2] >> b) & 1) << (3 * b)
    return code


def _spread_bits(v: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros_like(v)
    for b in range(depth):
        out |= ((v >> b) & 1) << (3 * b)
    return out


def morton_decode(code: np.ndarray, depth: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64).reshape(-1)
    ijk = np.zeros((len(code), 3), dtype=np.int64)
    for b in range(depth):
        ijk[:, 0] |= ((code >> (3 * b + 2)) & 1) << b
        ijk[:, 1] |= ((code >> (3 * b + 1)) & 1) << b
        ijk[:, 2] |= ((code >> (3 * b)) & 1) << b
    return ijk


def _floor_log2(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64)
    e = np.floor(np.log2(np.maximum(n, 1).astype(float))).astype(np.int64)
    one = np.int64(1)
    e = np.where((one << e) > n, e - 1, e)
    e = np.where((one << (e + 1)) <= n, e + 1, e)
    return e


def _merge_intervals(starts: np.ndarray, ends: np.ndarray):
    """Sort and fuse overlapping or touching half-open intervals."""
    if len(starts) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.argsort(starts, kind="stable")
    s, e = starts[order], ends[order]
    run_end = np.maximum.accumulate(e)
    brk = np.ones(len(s), dtype=bool)
    brk[1:] = s[1:] > run_end[:-1]
    first = np.nonzero(brk)[0]
    last = np.append(first[1:], len(s)) - 1
    return s[first], run_end[last]


def _codes_to_intervals(codes: np.ndarray):
    codes = np.unique(np.asarray(codes, dtype=np.int64))
    return _merge_intervals(codes, codes + 1)


# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Octree:
    box: Box3
    depth: int
    starts: np.ndarray
    ends: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (1 <= int(self.depth) <= MAX_DEPTH):
            raise OctreeError(f"max_depth must be in [1, {MAX_DEPTH}], got {self.depth}")
        s, e = _merge_intervals(
            np.asarray(self.starts, dtype=np.int64), np.asarray(self.ends, dtype=np.int64)
        )
        s.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "depth", int(self.depth))
        object.__setattr__(self, "starts", s)
        object.__setattr__(self, "ends", e)

    # -- constructors -------------------------------------------------------
    @classmethod
    def empty(cls, box: Box3, depth: int) -> "Octree":
        return cls(box, depth, np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def full(cls, box: Box3, depth: int) -> "Octree":
        return cls(box, depth, np.array([0]), np.array([1 << (3 * depth)]))

    @classmethod
    def from_voxels(cls, box: Box3, depth: int, ijk: np.ndarray) -> "Octree":
        s, e = _codes_to_intervals(morton_encode(ijk, depth))
        return cls(box, depth, s, e)

    @classmethod
    def from_dense(cls, box: Box3, mask: np.ndarray) -> "Octree":
        mask = np.asarray(mask, dtype=bool)
        n = mask.shape[0]
        depth = int(round(np.log2(n)))
        if mask.shape != (n, n, n) or (1 << depth) != n:
            raise OctreeError("dense mask must be a cube of side 2**depth")
        # encode slab by slab so only the set voxels are ever held as codes
        sp = _spread_bits(np.arange(n, dtype=np.int64), depth)
        jk = (sp[:, None] << 1) | sp[None, :]
        parts = [(sp[i] << 2) | jk[mask[i]] for i in range(n) if mask[i].any()]
        if not parts:
            return cls.empty(box, depth)
        codes = np.concatenate(parts)
        del parts
        codes.sort()
        brk = np.flatnonzero(np.diff(codes) != 1)
        starts = codes[np.r_[0, brk + 1]]
        ends = codes[np.r_[brk, len(codes) - 1]] + 1
        return cls(box, depth, starts, ends)

    @classmethod
    def from_leaves(cls, box: Box3, depth: int, levels, codes) -> "Octree":
        levels = np.asarray(levels, dtype=np.int64)
        codes = np.asarray(codes, dtype=np.int64)
        shift = 3 * (depth - levels)
        return cls(box, depth, codes << shift, (codes + 1) << shift)

    # -- basic queries ------------------------------------------------------
    @property
    def n_voxels(self) -> int:
        return int(np.sum(self.ends - self.starts))

    @property
    def voxel_volume(self) -> float:
        return self.box.volume / float(1 << (3 * self.depth))

    def volume(self) -> float:
        return self.n_voxels * self.voxel_volume

    def is_empty(self) -> bool:
        return len(self.starts) == 0

    def same_structure(self, other: "Octree") -> bool:
        return (
            self.box == other.box
            and self.depth == other.depth
            and np.array_equal(self.starts, other.starts)
            and np.array_equal(self.ends, other.ends)
        )

    def contains_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        idx = np.searchsorted(self.starts, codes, side="right") - 1
        ok = idx >= 0
        ok[ok] = codes[ok] < self.ends[idx[ok]]
        return ok

    def contains_points(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.box.inside(p)
        ijk = self.box.voxel_index(p, self.depth)
        ijk = np.clip(ijk, 0, (1 << self.depth) - 1)
        return inside & self.contains_codes(morton_encode(ijk, self.depth))

    def contains(self, p) -> bool:
        return bool(self.contains_points(np.asarray(p, dtype=float)[None])[0])

    def voxels(self) -> np.ndarray:
        """All FULL voxels at max depth, ``(N, 3)`` integer coordinates."""
        if self.is_empty():
            return np.zeros((0, 3), np.int64)
        lens = self.ends - self.starts
        codes = np.repeat(self.starts - np.cumsum(np.r_[0, lens[:-1]]), lens) + np.arange(lens.sum())
        return morton_decode(codes, self.depth)

    def to_dense(self) -> np.ndarray:
        n = 1 << self.depth
        out = np.zeros((n, n, n), dtype=bool)
        lvl, code = self.leaves()
        for L in np.unique(lvl):
            side = 1 << (self.depth - int(L))
            c = morton_decode(code[lvl == L], int(L)) * side
            if side > 4:
                for i, j, k in c:
                    out[i : i + side, j : j + side, k : k + side] = True
                continue
            r = np.arange(side)
            off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
            step = max(1, (1 << 20) // len(off))
            for s0 in range(0, len(c), step):
                v = (c[s0 : s0 + step, None, :] + off[None]).reshape(-1, 3)
                out[v[:, 0], v[:, 1], v[:, 2]] = True
        return out

    # -- tree view ----------------------------------------------------------
    def leaves(self):
        """FULL leaves of the normalized tree as ``(levels, codes)``, Morton order."""
        if "leaves" in self._cache:
            return self._cache["leaves"]
        D = self.depth
        a = self.starts.copy()
        b = self.ends
        out_lvl, out_code, out_start = [], [], []
        active = np.arange(len(a))
        while len(active):
            aa = a[active]
            n = b[active] - aa
            low = np.where(aa == 0, np.int64(1) << (3 * D), aa & -aa)
            k_align = _floor_log2(low) // 3
            k_fit = _floor_log2(n) // 3
            k = np.minimum(np.minimum(k_align, k_fit), D)
            size = np.int64(1) << (3 * k)
            out_lvl.append(D - k)
            out_code.append(aa >> (3 * k))
            out_start.append(aa)
            a[active] = aa + size
            active = active[a[active] < b[active]]
        if out_lvl:
            lvl = np.concatenate(out_lvl)
            code = np.concatenate(out_code)
            order = np.argsort(np.concatenate(out_start), kind="stable")
            res = (lvl[order], code[order])
        else:
            res = (np.zeros(0, np.int64), np.zeros(0, np.int64))
        self._cache["leaves"] = res
        return res

    def node_state(self, level, code) -> np.ndarray:
        """State of the nodes ``(level, code)`` of the normalized tree."""
        level = np.asarray(level, dtype=np.int64)
        code = np.asarray(code, dtype=np.int64)
        shift = 3 * (self.depth - level)
        lo = code << shift
        hi = (code + 1) << shift
        # voxels of [lo, hi) covered by FULL intervals
        covered = self._covered(hi) - self._covered(lo)
        return np.where(covered == 0, EMPTY, np.where(covered == hi - lo, FULL, MIXED))

    def _covered(self, x: np.ndarray) -> np.ndarray:
        """Number of FULL voxels with code < x."""
        lens = self.ends - self.starts
        cum = np.r_[0, np.cumsum(lens)]
        idx = np.searchsorted(self.starts, x, side="right")
        part = np.zeros_like(x)
        inside = idx > 0
        j = idx[inside] - 1
        part[inside] = np.minimum(x[inside], self.ends[j]) - self.starts[j]
        base = np.where(inside, cum[np.maximum(idx - 1, 0)], 0)
        return base + np.maximum(part, 0)

    def cell_bounds(self, levels, codes):
        """Lower/upper corners of cells ``(level, code)``."""
        levels = np.asarray(levels, dtype=np.int64)
        codes = np.asarray(codes, dtype=np.int64)
        lo_out = np.empty((len(codes), 3))
        hi_out = np.empty((len(codes), 3))
        ext = self.box.extent
        blo = np.asarray(self.box.lo)
        for lvl in np.unique(levels):
            m = levels == lvl
            ijk = morton_decode(codes[m], int(lvl))
            h = ext / float(1 << int(lvl))
            lo_out[m] = blo + ijk * h
            hi_out[m] = lo_out[m] + h
        return lo_out, hi_out

    # -- set algebra --------------------------------------------------------
    def _check(self, other: "Octree"):
        if self.box != other.box:
            raise OctreeError("octrees over different boxes cannot be combined")

    def _align(self, other: "Octree"):
        self._check(other)
        D = max(self.depth, other.depth)
        return self._promote(D), other._promote(D)

    def _promote(self, D: int) -> "Octree":
        if D == self.depth:
            return self
        s = 3 * (D - self.depth)
        return Octree(self.box, D, self.starts << s, self.ends << s)

    def _combine(self, other: "Octree", op) -> "Octree":
        a, b = self._align(other)
        pts = np.unique(np.concatenate([a.starts, a.ends, b.starts, b.ends, [0, 1 << (3 * a.depth)]]))
        seg_lo, seg_hi = pts[:-1], pts[1:]
        keep = op(a.contains_codes(seg_lo), b.contains_codes(seg_lo))
        return Octree(a.box, a.depth, seg_lo[keep], seg_hi[keep])

    def union(self, other: "Octree") -> "Octree":
        return self._combine(other, np.logical_or)

    def intersection(self, other: "Octree") -> "Octree":
        return self._combine(other, np.logical_and)

    def difference(self, other: "Octree") -> "Octree":
        return self._combine(other, lambda x, y: x & ~y)

    def complement(self) -> "Octree":
        return Octree.full(self.box, self.depth).difference(self)

    __or__ = union
    __and__ = intersection
    __sub__ = difference

    def __eq__(self, other):
        return isinstance(other, Octree) and self.same_structure(other)

    def __hash__(self):
        return hash((self.box, self.depth, self.starts.tobytes(), self.ends.tobytes()))

    # -- export -------------------------------------------------------------
    def export_records(self, labels: np.ndarray | None = None) -> list[str]:
        """One ``"cx cy cz size label"`` line per FULL leaf, lexicographically sorted.

        ``size`` is the leaf edge along axis 0; edges along the other axes
        follow from the box aspect ratio.  ``labels`` is aligned with
        :meth:`leaves`; ``-1`` is written when absent.
        """
        lvl, code = self.leaves()
        lo, hi = self.cell_bounds(lvl, code)
        c = 0.5 * (lo + hi)
        size = hi[:, 0] - lo[:, 0]
        lab = np.full(len(lvl), -1, dtype=np.int64) if labels is None else np.asarray(labels)
        order = np.lexsort((c[:, 2], c[:, 1], c[:, 0]))
        return [
            f"{c[i, 0]:.9g} {c[i, 1]:.9g} {c[i, 2]:.9g} {size[i]:.9g} {int(lab[i])}" for i in order
        ]


# --------------------------------------------------------------------------
# construction

def build(box: Box3, classify: Classifier, max_depth: int) -> Octree:
    """Recursive subdivision driven by a vectorised cell classifier.

    ``classify(lo, hi)`` receives ``(N, 3)`` arrays of cell bounds and
    returns FULL / EMPTY / MIXED per cell.  MIXED cells are split until the
    classifier decides or ``max_depth`` is reached; there the classifier is
    called on the zero-width box at the cell centre and must decide.
    """
    if not (1 <= int(max_depth) <= MAX_DEPTH):
        raise OctreeError(f"max_depth must be in [1, {MAX_DEPTH}], got {max_depth}")
    D = int(max_depth)
    ext = box.extent
    blo = np.asarray(box.lo)
    starts, ends = [], []
    parents = None  # MIXED cells of the previous level
    batch = 1 << 15
    for lvl in range(D + 1):
        h = ext / float(1 << lvl)
        shift = 3 * (D - lvl)
        if parents is None:
            chunks = [np.zeros(1, dtype=np.int64)]
        else:
            chunks = (
                (parents[i : i + batch, None] * 8 + np.arange(8, dtype=np.int64)[None, :]).reshape(-1)
                for i in range(0, len(parents), batch)
            )
        mixed = []
        for codes in chunks:
            lo = blo + morton_decode(codes, lvl) * h
            if lvl == D:
                c = lo + 0.5 * h
                st = np.asarray(classify(c, c))
                if np.any(st == MIXED):
                    raise OctreeError("classifier must decide zero-width cells")
            else:
                st = np.asarray(classify(lo, lo + h))
            f = codes[st == FULL]
            if len(f):
                # codes arrive sorted: store runs of consecutive cells
                brk = np.flatnonzero(np.diff(f) != 1)
                starts.append(f[np.r_[0, brk + 1]] << shift)
                ends.append((f[np.r_[brk, len(f) - 1]] + 1) << shift)
            mixed.append(codes[st == MIXED])
        parents = np.concatenate(mixed)
        if lvl == D or len(parents) == 0:
            break
    if not starts:
        return Octree.empty(box, D)
    return Octree(box, D, np.concatenate(starts), np.concatenate(ends))


def union(a: Octree, b: Octree) -> Octree:
    return a.union(b)


def intersection(a: Octree, b: Octree) -> Octree:
    return a.intersection(b)


def difference(a: Octree, b: Octree) -> Octree:
    return a.difference(b)


def volume(o: Octree) -> float:
    return o.volume()


def contains(o: Octree, p) -> bool:
    return o.contains(p)


# --------------------------------------------------------------------------
# connectivity

_DIRS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def leaf_adjacency(o: Octree) -> sparse.csr_matrix:
    """Symmetric face-adjacency matrix between FULL leaves.

    Each pair is discovered from its smaller (or equal) member: the
    same-sized cube across one of its faces lies inside the neighbour.
    """
    lvl, code = o.leaves()
    n = len(lvl)
    starts = code << (3 * (o.depth - lvl))
    sizes = np.int64(1) << (3 * (o.depth - lvl))
    rows, cols = [], []
    for L in np.unique(lvl):
        m = np.nonzero(lvl == L)[0]
        ijk = morton_decode(code[m], int(L))
        side = 1 << int(L)
        for d in _DIRS:
            nb = ijk + d
            ok = np.ones(len(m), dtype=bool)
            for a in range(3):
                if o.box.periodic[a]:
                    nb[:, a] %= side
                else:
                    ok &= (nb[:, a] >= 0) & (nb[:, a] < side)
            if not ok.any():
                continue
            src = m[ok]
            nstart = morton_encode(nb[ok], int(L)) << (3 * (o.depth - int(L)))
            j = np.searchsorted(starts, nstart, side="right") - 1
            hit = j >= 0
            hit[hit] = (nstart[hit] < starts[j[hit]] + sizes[j[hit]]) & (
                sizes[j[hit]] >= (np.int64(1) << (3 * (o.depth - int(L))))
            )
            hit &= j != src
            rows.append(src[hit])
            cols.append(j[hit])
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.zeros(0, np.int64)
    adj = sparse.coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.int8)
    return adj


@dataclass
class CellLabeling:
    """Component label per FULL leaf (aligned with ``octree.leaves()``)."""

    octree: Octree
    labels: np.ndarray
    count: int

    def label_of_points(self, points) -> np.ndarray:
        o = self.octree
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ijk = np.clip(o.box.voxel_index(p, o.depth), 0, (1 << o.depth) - 1)
        codes = morton_encode(ijk, o.depth)
        leaf = leaf_index(o, codes)
        out = np.full(len(p), -1, dtype=np.int64)
        ok = (leaf >= 0) & o.box.inside(p)
        out[ok] = self.labels[leaf[ok]]
        return out

    def label_of(self, p) -> int:
        return int(self.label_of_points(np.asarray(p, dtype=float)[None])[0])

    def component(self, k: int) -> Octree:
        lvl, code = self.octree.leaves()
        m = self.labels == k
        return Octree.from_leaves(self.octree.box, self.octree.depth, lvl[m], code[m])

    def sizes(self) -> np.ndarray:
        lvl, _ = self.octree.leaves()
        vox = np.int64(1) << (3 * (self.octree.depth - lvl))
        return np.bincount(self.labels, weights=vox, minlength=self.count).astype(np.int64)


def leaf_index(o: Octree, codes: np.ndarray) -> np.ndarray:
    """Index into ``o.leaves()`` of the leaf holding each finest-level code, or -1."""
    lvl, code = o.leaves()
    starts = code << (3 * (o.depth - lvl))
    ends = (code + 1) << (3 * (o.depth - lvl))
    codes = np.asarray(codes, dtype=np.int64)
    j = np.searchsorted(starts, codes, side="right") - 1
    ok = j >= 0
    ok[ok] = codes[ok] < ends[j[ok]]
    return np.where(ok, j, -1)


def components(o: Octree) -> CellLabeling:
    lvl, _ = o.leaves()
    if len(lvl) == 0:
        return CellLabeling(o, np.zeros(0, np.int64), 0)
    adj = o._cache.get("adjacency")
    if adj is None:
        adj = leaf_adjacency(o)
        o._cache["adjacency"] = adj
    n, raw = csgraph.connected_components(adj, directed=False)
    # renumber by first leaf in Morton order
    first = np.full(n, len(raw))
    np.minimum.at(first, raw, np.arange(len(raw)))
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(n)
    return CellLabeling(o, rank[raw], n)


@dataclass(frozen=True)
class Cell:
    level: int
    code: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


def _cells(o: Octree, idx) -> list[Cell]:
    lvl, code = o.leaves()
    idx = np.asarray(idx, dtype=np.int64)
    lo, hi = o.cell_bounds(lvl[idx], code[idx])
    return [Cell(int(lvl[i]), int(code[i]), lo[k], hi[k]) for k, i in enumerate(idx)]


def cell_path(o: Octree, start, goal, labeling: CellLabeling | None = None, weight=None):
    """Face-adjacent chain of FULL leaves from ``start`` to ``goal``.

    Returns ``None`` when the two points are in different components.
    Edges are weighted by the distance between leaf centres in box-normalised
    coordinates (each axis rescaled to unit length, periodic axes wrapped),
    optionally multiplied by ``weight[leaf]`` of the destination leaf.
    """
    lab = labeling if labeling is not None else components(o)
    lvl, code = o.leaves()
    ijk = np.clip(o.box.voxel_index(np.asarray([start, goal], dtype=float), o.depth), 0, (1 << o.depth) - 1)
    pts = np.asarray([start, goal], dtype=float)
    li = leaf_index(o, morton_encode(ijk, o.depth))
    li[~o.box.inside(pts)] = -1
    if np.any(li < 0):
        raise EmptyCellError("path endpoint is not inside a FULL cell")
    a, b = int(li[0]), int(li[1])
    if lab.labels[a] != lab.labels[b]:
        return None
    if a == b:
        return _cells(o, [a])
    adj = o._cache.get("adjacency")
    if adj is None:
        adj = leaf_adjacency(o)
        o._cache["adjacency"] = adj
    # restrict the search to the shared component
    comp = np.nonzero(lab.labels == lab.labels[a])[0]
    pos = np.full(len(lvl), -1)
    pos[comp] = np.arange(len(comp))
    sub = adj[comp][:, comp].tocoo()
    lo, hi = o.cell_bounds(lvl[comp], code[comp])
    cen = 0.5 * (lo + hi) / o.box.extent
    delta = np.abs(cen[sub.row] - cen[sub.col])
    for ax in range(3):
        if o.box.periodic[ax]:
            delta[:, ax] = np.minimum(delta[:, ax], 1.0 - delta[:, ax])
    w = np.linalg.norm(delta, axis=1) + 1e-12
    if weight is not None:
        w = w * np.asarray(weight, dtype=float)[comp][sub.col]
    g = sparse.csr_matrix((w, (sub.row, sub.col)), shape=(len(comp), len(comp)))
    _, pred = csgraph.dijkstra(g, directed=True, indices=pos[a], return_predecessors=True)
    node = pos[b]
    chain = []
    while node >= 0:
        chain.append(node)
        node = pred[node]
    chain.reverse()
    return _cells(o, comp[np.asarray(chain)])
