"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary, then asserts.  Depth 8 is built once for criterion 3 and
needs several minutes and about 2.5 GB of memory.
"""
import time

import numpy as np
import pytest

from common import G, Q_REF, REF_ROWS, fd_jacobians, reachable_poses
from conftest import ACCEPTANCE, atlas_at
from rpratlas import cli
from rpratlas import kinematics as kin
from rpratlas import regions as R
from rpratlas.kinematics import Pose, jacobians, solve_dkp
from rpratlas.trajectory import detA_margin, find_mode_change_path, verify_path

REGION_TARGET = 28
DOMAIN_TARGET = 6


def report(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


_counts: dict[int, int] = {}


def region_counts():
    for d in (6, 7):
        _counts[d] = len(atlas_at(d).basic_regions)
    if 8 not in _counts:
        # too large to keep alive next to the cached atlases
        _counts[8] = len(R.build_atlas(G, R.AtlasConfig(depth=8)).basic_regions)
    return dict(_counts)


def accepted_depth(counts):
    """Shallowest cached depth hitting the target stably, else the default 7."""
    for a in (6, 7):
        if counts[a] == counts[a + 1] == REGION_TARGET:
            return a
    return 7


def test_criterion_1_reference():
    t = time.perf_counter()
    sols = solve_dkp(G, Q_REF)
    dt = time.perf_counter() - t
    got = sorted(s.as_array().tolist() for s in sols)
    err = float(np.abs(np.array(got) - np.array(sorted(REF_ROWS))).max()) if len(got) == 6 else float("inf")
    ok = len(sols) == 6 and err <= 5e-3 and dt < 1.0
    report(1, ok, f"{len(sols)} solutions, max |entry - printed| = {err:.4f} (tol 5e-3), {dt * 1e3:.1f} ms")
    assert ok


def test_criterion_2_aspects():
    lines = []
    ok = True
    for d in (6, 7):
        a = atlas_at(d)
        lab = a.aspect_of(np.array(REF_ROWS))
        signs = sorted(x.sign for x in a.aspects)
        ok_d = signs == [-1, 1] and lab[1] == lab[2] == lab[5] >= 0
        ok &= ok_d
        lines.append(f"depth {d}: {len(a.aspects)} aspects signs {signs}, rows 2/3/6 in {lab[[1, 2, 5]].tolist()}")
    report(2, ok, "; ".join(lines))
    assert ok


def test_criterion_3_basic_regions():
    counts = region_counts()
    ds = sorted(counts)
    hit = any(v == REGION_TARGET for v in counts.values())
    stable = any(counts[a] == counts[b] == REGION_TARGET for a, b in zip(ds, ds[1:]))
    ok = hit and stable
    report(3, ok, f"basic regions by depth {counts} (target {REGION_TARGET}, stable across consecutive depths)")
    assert ok


def test_criterion_4_uniqueness_domains():
    counts = region_counts()
    d = accepted_depth(counts)
    a = atlas_at(d)
    res = R.dkp_multiplicity_map(a, samples=2000, seed=0)
    top = max(res["histogram"])
    nd = len(a.uniqueness_domains)
    ok = nd == DOMAIN_TARGET and nd >= top
    report(4, ok, f"depth {d}: {nd} uniqueness domains (target {DOMAIN_TARGET}), max sampled multiplicity {top}")
    assert ok


def test_criterion_5_multiplicity_structure():
    a = atlas_at(7)
    res = R.dkp_multiplicity_map(a, samples=2000, seed=0)
    seen = set(res["histogram"])
    sizes = sorted(c.multiplicity for c in a.coincidence_classes)
    cell = int(a.joint_cell_of([Q_REF])[0])
    ref_sizes = sorted({c.multiplicity for c in a.coincidence_classes if c.joint_cell == cell})
    ok = seen <= {2, 4, 6} and {2, 4, 6} <= set(sizes) and 6 in ref_sizes
    report(5, ok, f"sampled counts {res['histogram']}, class sizes {sizes}, class sizes at reference cell {ref_sizes}")
    assert ok


def _6a():
    X = reachable_poses(1000, seed=11)
    rng = np.random.default_rng(12)
    worst = 0.0
    for x in X:
        q = rng.uniform(10, 32, 3)
        J = jacobians(G, q, Pose(*x))
        A, B = fd_jacobians(G, q, x)
        worst = max(worst, np.abs(J.a_matrix - A).max() / np.abs(A).max(),
                    np.abs(J.b_matrix - B).max() / np.abs(B).max())
    return worst < 1e-5, f"(a) jacobian rel err {worst:.2e}"


def _6b():
    X = reachable_poses(1000, seed=13, margin=1e-6)
    miss = 0
    for x in X:
        arr = np.array([s.as_array() for s in solve_dkp(G, kin.inverse_kinematics_batch(G, x[None])[0])])
        dxy = np.max(np.abs(arr[:, :2] - x[:2]), axis=1)
        dph = np.abs(kin.wrap_angle(arr[:, 2] - x[2]))
        miss += not np.any((dxy <= G.tol_pose_xy) & (dph <= G.tol_pose_phi))
    return miss == 0, f"(b) round trip misses {miss}/1000"


def _6c():
    from scipy import ndimage

    from rpratlas.octree import Box3, Octree, components, difference, intersection, union

    box = Box3((0, 0, 0), (1, 1, 1))
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ma = ndimage.gaussian_filter(rng.standard_normal((32, 32, 32)), 1.0, mode="wrap") > 0.1
        mb = ndimage.gaussian_filter(rng.standard_normal((32, 32, 32)), 1.0, mode="wrap") > 0.1
        a, b = Octree.from_dense(box, ma), Octree.from_dense(box, mb)
        ok = (
            np.array_equal(union(a, b).to_dense(), ma | mb)
            and np.array_equal(intersection(a, b).to_dense(), ma & mb)
            and np.array_equal(difference(a, b).to_dense(), ma & ~mb)
            and components(a).count == ndimage.label(ma)[1]
        )
        bad += not ok
    return bad == 0, f"(c) octree oracle mismatches {bad}/100"


def _6d():
    a = atlas_at(7)
    res = R.dkp_multiplicity_map(a, samples=500, seed=21)
    poses, _ = kin.solve_dkp_batch(G, res["q"])
    flat = poses.reshape(-1, 3)
    lab = np.full(len(flat), -1)
    ok = np.isfinite(flat[:, 0])
    lab[ok] = a.region_of(flat[ok])
    lab = lab.reshape(-1, 6)
    dup = sum(len(r[r >= 0]) != len(set(r[r >= 0].tolist())) for r in lab)
    return dup == 0, f"(d) joint vectors with two modes in one region {dup}/500"


def _6e():
    a = atlas_at(7)
    m = detA_margin(G)
    p = find_mode_change_path(a, G, Pose(*REF_ROWS[1]), Pose(*REF_ROWS[2]))
    rep = verify_path(G, p) if p is not None else None
    found = rep is not None and rep.valid and rep.min_abs_detA >= m
    refused = find_mode_change_path(a, G, Pose(*REF_ROWS[0]), Pose(*REF_ROWS[1])) is None
    detail = f"(e) 2->3 {'verified' if found else 'missing'}"
    if rep is not None:
        detail += f" min|detA| {rep.min_abs_detA:.3g} >= margin {m:.3g}"
    detail += f", 1->2 {'refused' if refused else 'accepted'}"
    return found and refused, detail


@pytest.mark.parametrize("part", ["a", "b", "c", "d", "e"])
def test_criterion_6_properties(part):
    ok, detail = {"a": _6a, "b": _6b, "c": _6c, "d": _6d, "e": _6e}[part]()
    report(f"6{part}", ok, detail)
    assert ok


def test_criterion_7_determinism(tmp_path):
    cfg = cli.RunConfig(depth=7, out=str(tmp_path / "out"))
    blobs = []
    for k in range(2):
        # the second run rebuilds from scratch
        atlas = atlas_at(7) if k == 0 else R.build_atlas(G, cfg.atlas_config())
        files = cli.write_atlas(atlas, cfg, tmp_path / "out")
        blobs.append({p.name: p.read_bytes() for p in files})
    same = blobs[0] == blobs[1]
    size = sum(len(v) for v in blobs[0].values())
    report(7, same, f"{len(blobs[0])} export files, {size} bytes, identical: {same}")
    assert same
