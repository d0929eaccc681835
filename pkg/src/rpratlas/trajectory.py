"""Workspace path verification and assembly-mode-changing path search."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .kinematics import Geometry, JointVector, Pose
from .octree import EmptyCellError, Octree, cell_path, components


@dataclass(frozen=True)
class WorkspacePath:
    """Piecewise path: straight in (x, y), shortest arc in phi, sampled at ``step``.

    ``step`` is measured in the scaled metric where phi is multiplied by
    ``reach / pi`` so the workspace box has equal extent on all axes.
    """

    waypoints: tuple[Pose, ...]
    step: float

    def __post_init__(self):
        wp = tuple(w if isinstance(w, Pose) else Pose(*w) for w in self.waypoints)
        object.__setattr__(self, "waypoints", wp)
        if not self.step > 0:
            raise ValueError("path step must be positive")
        for a, b in zip(wp, wp[1:]):
            if a == b:
                raise ValueError("consecutive waypoints must differ")

    def __len__(self):
        return len(self.waypoints)

    def as_array(self) -> np.ndarray:
        return np.array([w.as_array() for w in self.waypoints]).reshape(-1, 3)

    def samples(self, g: Geometry) -> np.ndarray:
        return sample_polyline(g, self.as_array(), self.step)


def phi_scale(g: Geometry) -> float:
    return g.reach / math.pi


def default_step(g: Geometry, depth: int) -> float:
    """A quarter of the finest leaf edge in the scaled metric."""
    return 0.25 * 2.0 * g.reach / (1 << depth)


def _segment_deltas(g: Geometry, P: np.ndarray) -> np.ndarray:
    d = np.diff(P, axis=0)
    d[:, 2] = kin.wrap_angle(d[:, 2])
    return d


def _scaled_lengths(g: Geometry, d: np.ndarray) -> np.ndarray:
    return np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + (d[:, 2] * phi_scale(g)) ** 2)


def sample_polyline(g: Geometry, P: np.ndarray, step: float) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if len(P) == 1:
        return P.copy()
    d = _segment_deltas(g, P)
    n = np.maximum(1, np.ceil(_scaled_lengths(g, d) / step).astype(np.int64))
    seg = np.repeat(np.arange(len(d)), n)
    t = (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)) / np.repeat(n, n)
    out = P[seg] + t[:, None] * d[seg]
    out = np.vstack([out, P[-1:]])
    out[:, 2] = kin.wrap_angle(out[:, 2])
    return out


@functools.lru_cache(maxsize=16)
def detA_margin(g: Geometry, samples: int = 20000, seed: int = 0) -> float:
    """``1e-3`` times the median of ``|det A|`` over uniform workspace samples."""
    rng = np.random.default_rng(seed)
    r = g.reach
    lo = np.array([g.a1[0] - r, g.a1[1] - r, -math.pi])
    hi = np.array([g.a1[0] + r, g.a1[1] + r, math.pi])
    got = []
    need = samples
    for _ in range(100):
        X = rng.uniform(lo, hi, size=(4 * samples, 3))
        X = X[kin.within_limits_batch(g, kin.inverse_kinematics_batch(g, X))]
        got.append(X[:need])
        need -= len(got[-1])
        if need <= 0:
            break
    X = np.concatenate(got)
    return 1e-3 * float(np.median(np.abs(kin.det_a_batch(g, X))))


@dataclass
class VerifyReport:
    valid: bool
    min_abs_detA: float
    limit_violations: list[int]
    sign_changes: int
    samples: int
    margin: float

    def as_text(self) -> str:
        lines = [
            f"valid: {'true' if self.valid else 'false'}",
            f"min_abs_detA: {self.min_abs_detA:.9g}",
            f"margin: {self.margin:.9g}",
            f"sign_changes: {self.sign_changes}",
            f"limit_violations: {len(self.limit_violations)}",
            f"samples: {self.samples}",
        ]
        return "\n".join(lines) + "\n"


def _check_samples(g: Geometry, S: np.ndarray, margin: float):
    d = kin.det_a_batch(g, S)
    sg = np.sign(d)
    changes = int(np.sum(sg[1:] * sg[:-1] < 0))
    q = kin.inverse_kinematics_batch(g, S)
    bad = np.nonzero(~kin.within_limits_batch(g, q))[0]
    mn = float(np.min(np.abs(d)))
    return changes, bad, mn


def verify_path(g: Geometry, p: WorkspacePath, margin: float | None = None) -> VerifyReport:
    if len(p) == 0:
        raise ValueError("empty path")
    m = detA_margin(g) if margin is None else float(margin)
    S = p.samples(g)
    changes, bad, mn = _check_samples(g, S, m)
    valid = changes == 0 and len(bad) == 0 and mn >= m
    return VerifyReport(valid, mn, [int(i) for i in bad], changes, len(S), m)


def _segment_ok(g: Geometry, a, b, step: float, margin: float) -> bool:
    S = sample_polyline(g, np.array([a, b]), step)
    changes, bad, mn = _check_samples(g, S, margin)
    return changes == 0 and len(bad) == 0 and mn >= margin


def _shortcut(g: Geometry, P: np.ndarray, step: float, margin: float) -> np.ndarray:
    """Greedy waypoint elision: jump to the farthest directly reachable waypoint."""
    out = [0]
    i = 0
    m = len(P) - 1
    while i < m:
        good = i + 1
        span = 1
        bad = None
        while good < m:
            j = min(i + 2 * span, m)
            if _segment_ok(g, P[i], P[j], step, margin):
                good, span = j, 2 * span
            else:
                bad = j
                break
        if bad is not None:
            lo, hi = good, bad
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if _segment_ok(g, P[i], P[mid], step, margin):
                    lo = mid
                else:
                    hi = mid
            good = lo
        out.append(good)
        i = good
    return P[out]


def _dedupe(P: np.ndarray) -> np.ndarray:
    keep = np.ones(len(P), dtype=bool)
    keep[1:] = np.any(np.abs(np.diff(P, axis=0)) > 0, axis=1)
    return P[keep]


def _eroded(atlas, aspect: int, steps: int) -> np.ndarray:
    from .regions import _neighbors

    grid = atlas._grid["aspect"] == aspect
    per = atlas.wbox.periodic
    out = grid.copy()
    for _ in range(steps):
        cur = out.copy()
        for ax in range(3):
            for st in (1, -1):
                cur &= _neighbors(out, ax, st, per[ax], False)
        out = cur
    return out


def _aspect_octree(atlas, aspect: int) -> Octree:
    return atlas.aspects[aspect].octree


def _snap(atlas, g, aspect, X, step, margin, radius=3):
    """A centre of an aspect voxel near ``X`` reachable by a verified segment."""
    n = 1 << atlas.depth
    grid = atlas._grid["aspect"]
    ijk = atlas.wbox.voxel_index(X[None], atlas.depth)[0]
    h = atlas.wbox.extent / n
    r = np.arange(-radius, radius + 1)
    off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    off = off[np.argsort(np.abs(off).sum(axis=1), kind="stable")]
    for o in off:
        u = ijk + o
        u[2] %= n
        if np.any(u[:2] < 0) or np.any(u[:2] >= n) or grid[u[0], u[1], u[2]] != aspect:
            continue
        c = np.asarray(atlas.wbox.lo) + (u + 0.5) * h
        if _segment_ok(g, X, c, step, margin):
            return c
    return None


def find_mode_change_path(atlas, g: Geometry, start: Pose, goal: Pose, margin: float | None = None,
                          step: float | None = None) -> WorkspacePath | None:
    """Non-singular path between two poses of one aspect, or ``None`` across aspects."""
    m = detA_margin(g) if margin is None else float(margin)
    st = default_step(g, atlas.depth) if step is None else float(step)
    A = np.array([start.as_array(), goal.as_array()])
    if not np.all(kin.within_limits_batch(g, kin.inverse_kinematics_batch(g, A))):
        raise ValueError("path endpoint outside the workspace")
    d = kin.det_a_batch(g, A)
    if np.any(np.abs(d) < m):
        raise ValueError("path endpoint within the det(A) margin of a singularity")
    if np.sign(d[0]) != np.sign(d[1]):
        return None
    sign = int(np.sign(d[0]))
    aspect = next((a.id for a in atlas.aspects if a.sign == sign), None)
    if aspect is None:
        return None
    if _segment_ok(g, A[0], A[1], st, m):
        return WorkspacePath((start, goal), st)
    oc = _aspect_octree(atlas, aspect)
    lab = components(oc)
    ends = []
    for X in A:
        c = _snap(atlas, g, aspect, X, st, m)
        if c is None:
            raise EmptyCellError("no verified link from endpoint into its aspect")
        ends.append(c)
    lvl, code = oc.leaves()
    lo, hi = oc.cell_bounds(lvl, code)
    cen = 0.5 * (lo + hi)
    for erosion in (2, 1, 0):
        if erosion:
            inner = _eroded(atlas, aspect, erosion)
            ijk = atlas.wbox.voxel_index(cen, atlas.depth)
            weight = np.where(inner[ijk[:, 0], ijk[:, 1], ijk[:, 2]], 1.0, 50.0)
        else:
            weight = None
        cells = cell_path(oc, ends[0], ends[1], labeling=lab, weight=weight)
        if cells is None:
            return None
        pts = [A[0], ends[0]]
        for c0, c1 in zip(cells, cells[1:]):
            pts.append(c0.center)
            pts.append(_face_center(atlas.wbox, c0, c1))
        pts.append(cells[-1].center)
        pts += [ends[1], A[1]]
        P = _dedupe(np.array(pts))
        P[:, 2] = kin.wrap_angle(P[:, 2])
        full = WorkspacePath(tuple(Pose(*w) for w in P), st)
        if not verify_path(g, full, m).valid:
            continue
        P = _dedupe(_shortcut(g, P, st, m))
        path = WorkspacePath(tuple(Pose(*w) for w in P), st)
        if verify_path(g, path, m).valid:
            return path
        return full
    raise RuntimeError("no verified path found at this depth")


def _face_center(box, c0, c1) -> np.ndarray:
    """Centre of the shared face of two adjacent cells (periodic axes wrapped)."""
    lo0, hi0, lo1, hi1 = c0.lo.copy(), c0.hi.copy(), c1.lo.copy(), c1.hi.copy()
    ext = box.extent
    for ax in range(3):
        if box.periodic[ax]:
            if lo1[ax] - hi0[ax] > 0.5 * ext[ax]:
                lo1[ax] -= ext[ax]
                hi1[ax] -= ext[ax]
            elif lo0[ax] - hi1[ax] > 0.5 * ext[ax]:
                lo1[ax] += ext[ax]
                hi1[ax] += ext[ax]
    lo = np.maximum(lo0, lo1)
    hi = np.minimum(hi0, hi1)
    return 0.5 * (lo + hi)


def trace_joint_trajectory(g: Geometry, p: WorkspacePath, margin: float | None = None) -> list[JointVector]:
    rep = verify_path(g, p, margin)
    if not rep.valid:
        raise ValueError(
            f"path fails verification: {rep.sign_changes} sign changes, "
            f"{len(rep.limit_violations)} limit violations, min |det A| {rep.min_abs_detA:.3g}"
        )
    q = kin.inverse_kinematics_batch(g, p.samples(g))
    return [JointVector(*row) for row in q]


def path_regions(atlas, g: Geometry, p: WorkspacePath) -> list[int]:
    """Basic-region ids met along the path, consecutive repeats and gaps removed."""
    lab = atlas.region_of(p.samples(g))
    out: list[int] = []
    for v in lab:
        if v >= 0 and (not out or out[-1] != v):
            out.append(int(v))
    return out


# -- CSV ------------------------------------------------------------------

def path_to_csv(p: WorkspacePath) -> str:
    return "".join(f"{w.x:.9g},{w.y:.9g},{w.phi:.9g}\n" for w in p.waypoints)


def path_from_csv(text: str, step: float) -> WorkspacePath:
    rows = []
    for k, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"line {k}: expected 'x,y,phi'")
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise ValueError(f"line {k}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"line {k}: non-finite value")
        rows.append(Pose(*vals))
    if not rows:
        raise ValueError("empty path")
    return WorkspacePath(tuple(rows), step)
