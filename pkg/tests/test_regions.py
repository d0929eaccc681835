import math

import numpy as np
import pytest

from common import G, Q_REF, REF_ROWS
from rpratlas import kinematics as kin
from rpratlas import regions as R
from rpratlas.octree import Octree, components, intersection, union


def det_sign_change_in_voxel(g, lo, hi, k=7):
    """Dense sample of one closed voxel: does det A take both signs?"""
    axes = [np.linspace(lo[i], hi[i], k) for i in range(3)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d = kin.det_a_batch(g, P)
    return bool(np.any(d > 0) and np.any(d < 0))


def test_reference_poses_in_workspace(atlas6):
    W = atlas6.workspace
    assert np.all(W.contains_points(np.array(REF_ROWS)))
    assert not W.contains_points(np.zeros((1, 3)))[0]


def nearest_region(atlas, x, radius=2):
    """Region of ``x``, or the closest labelled voxel of its aspect within ``radius``."""
    grid, asp = atlas._grid["region"], atlas._grid["aspect"]
    n = 1 << atlas.depth
    i, j, k = atlas.wbox.voxel_index(np.atleast_2d(x), atlas.depth)[0]
    want = int(asp[i, j, k])
    r = np.arange(-radius, radius + 1)
    off = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    off = off[np.argsort(np.abs(off).sum(axis=1), kind="stable")]
    for di, dj, dk in off:
        a, b, c = i + di, j + dj, (k + dk) % n
        if 0 <= a < n and 0 <= b < n and grid[a, b, c] >= 0 and asp[a, b, c] == want:
            return int(grid[a, b, c])
    return -1


def test_reference_poses_in_distinct_regions(atlas7):
    # a pose in a thin voxel takes the nearest region of its aspect
    lab = [nearest_region(atlas7, r) for r in REF_ROWS]
    assert min(lab) >= 0
    assert len(set(lab)) == 6


def test_workspace_classifier_is_conservative():
    cls = R.workspace_classifier(G)
    rng = np.random.default_rng(0)
    lo = rng.uniform([-30, -30, -math.pi], [28, 28, 2.8], size=(4000, 3))
    hi = lo + rng.uniform(0.05, 3, size=(4000, 3)) * [1, 1, 0.1]
    st = cls(lo, hi)
    assert {R.FULL, R.EMPTY} <= set(st.tolist())
    for i in np.nonzero(st != R.MIXED)[0]:
        X = rng.uniform(lo[i], hi[i], size=(40, 3))
        ok = kin.within_limits_batch(G, kin.inverse_kinematics_batch(G, X))
        assert np.all(ok) if st[i] == R.FULL else not np.any(ok)


def test_workspace_membership_is_centre_test(atlas6):
    W = atlas6.workspace
    rng = np.random.default_rng(0)
    # finest level: membership is the centre test
    box = atlas6.wbox
    X = rng.uniform(box.lo, box.hi, size=(20000, 3))
    ijk = box.voxel_index(X, W.depth)
    cen = np.asarray(box.lo) + (ijk + 0.5) * box.extent / (1 << W.depth)
    ref = kin.within_limits_batch(G, kin.inverse_kinematics_batch(G, cen))
    assert np.array_equal(W.contains_points(X), ref)


def test_joint_space_matches_dkp_counts(atlas6):
    Q = atlas6.joint_space
    rng = np.random.default_rng(1)
    box = atlas6.jbox
    q = rng.uniform(box.lo, box.hi, size=(5000, 3))
    ijk = box.voxel_index(q, Q.depth)
    cen = np.asarray(box.lo) + (ijk + 0.5) * box.extent / (1 << Q.depth)
    _, cnt = kin.solve_dkp_batch(G, cen, polish=False, merge_tol=1e-9)
    assert np.array_equal(Q.contains_points(q), cnt > 0)
    assert 0 < Q.volume() < np.prod(box.extent)
    assert Q.contains_points(np.array([Q_REF]))[0]


def test_singular_set_inside_workspace_and_sound(atlas6):
    S, W = atlas6.singular_set, atlas6.workspace
    assert S.difference(W).is_empty()
    assert S.n_voxels > 0
    rng = np.random.default_rng(2)
    v = S.voxels()
    h = atlas6.wbox.extent / (1 << S.depth)
    lo = np.asarray(atlas6.wbox.lo) + v * h
    hits = sum(det_sign_change_in_voxel(G, lo[i], lo[i] + h) for i in rng.choice(len(v), 300, replace=False))
    # voxels marked only through a reachable tangency may show one sign
    assert hits >= 0.95 * 300


def test_singular_set_catches_sign_changes(atlas6):
    """Free voxels of W carry a single det A sign."""
    free = atlas6.workspace.difference(atlas6.singular_set)
    v = free.voxels()
    rng = np.random.default_rng(3)
    h = atlas6.wbox.extent / (1 << free.depth)
    lo = np.asarray(atlas6.wbox.lo) + v * h
    bad = sum(det_sign_change_in_voxel(G, lo[i], lo[i] + h, k=4) for i in rng.choice(len(v), 400, replace=False))
    assert bad <= 2


def test_two_aspects_opposite_signs(atlas6):
    a = atlas6.aspects
    assert len(a) == 2
    assert {x.sign for x in a} == {-1, 1}
    lab = atlas6.aspect_of(np.array(REF_ROWS))
    assert lab[1] == lab[2] == lab[5] >= 0
    for k, row in enumerate(REF_ROWS):
        assert atlas6.aspects[lab[k]].sign == np.sign(kin.det_a_batch(G, np.array([row]))[0])


def test_aspect_samples_have_aspect_sign(atlas6):
    rng = np.random.default_rng(4)
    for a in atlas6.aspects:
        lvl, code = a.octree.leaves()
        lo, hi = a.octree.cell_bounds(lvl, code)
        w = np.exp2(-3.0 * lvl)
        pick = rng.choice(len(lvl), 2000, p=w / w.sum())
        X = rng.uniform(lo[pick], hi[pick])
        s = np.sign(kin.det_a_batch(G, X))
        assert np.mean(s == a.sign) > 0.999


def test_partition_identities(atlas6):
    a0, a1 = atlas6.aspects
    assert intersection(a0.octree, a1.octree).is_empty()
    free = atlas6.workspace.difference(atlas6.singular_set)
    assert union(union(a0.octree, a1.octree), atlas6.aspect_fragments) == free
    for a in atlas6.aspects:
        parts = [r.octree for r in atlas6.basic_regions if r.aspect == a.id]
        parts += [atlas6.characteristic[a.id], atlas6.region_fragments[a.id]]
        total = Octree.empty(atlas6.wbox, atlas6.depth)
        n = 0
        for p in parts:
            assert intersection(total, p).is_empty()
            total = union(total, p)
            n += p.n_voxels
        assert total == a.octree and n == a.octree.n_voxels
        assert intersection(atlas6.characteristic[a.id], atlas6.singular_set).is_empty()


def test_regions_are_connected_and_keyed(atlas6):
    key = atlas6._grid["key"]
    for r in atlas6.basic_regions:
        assert components(r.octree).count == 1
        v = r.octree.voxels()
        assert np.all(key[v[:, 0], v[:, 1], v[:, 2]] == r.joint_cell)
        assert r.coverage >= atlas6.config.cover_tol


def test_characteristic_cells_split_aspects(atlas6):
    for a in atlas6.aspects:
        assert sum(r.aspect == a.id for r in atlas6.basic_regions) > 1


def test_empty_characteristic_gives_aspects(atlas6):
    at = R.RegionAtlas(G, atlas6.config)
    for name in ("workspace", "singular_set", "joint_space", "joint_thin", "joint_cells"):
        setattr(at, name, getattr(atlas6, name))
    at.aspects = atlas6.aspects
    at._grid = dict(atlas6._grid)
    at.characteristic = {a.id: Octree.empty(atlas6.wbox, atlas6.depth) for a in atlas6.aspects}
    regions = R.compute_basic_regions(at)
    assert len(regions) == len(atlas6.aspects)
    assert [r.octree for r in regions] == [a.octree for a in atlas6.aspects]


def test_strict_mode_rejects_ambiguous_overlap(atlas6):
    if not atlas6.ambiguous_pairs:
        pytest.skip("no ambiguous pair at this depth")
    at = R.RegionAtlas(G, R.AtlasConfig(depth=6, strict=True))
    for name in ("workspace", "singular_set", "joint_space", "joint_thin", "joint_cells", "aspects",
                 "characteristic", "basic_regions", "region_fragments", "raw_region_count"):
        setattr(at, name, getattr(atlas6, name))
    at._grid = dict(atlas6._grid)
    with pytest.raises(R.AmbiguousOverlap):
        R.compute_basic_components(at)


def test_seed_replay_hits_share_joint_vector(atlas6):
    hits = atlas6.seed_hits
    assert len(hits) > 0
    P, q = hits[:, :3], hits[:, 3:]
    # each hit is another assembly of a joint vector with a singular pose
    assert np.max(np.abs(kin.residual_batch(G, q, P))) < 1e-6 * G.det_scale
    assert np.all(atlas6.aspect_of(P) >= 0)
    d = kin.det_a_batch(G, P)
    assert np.median(np.abs(d)) > 1e-3 * G.det_scale


def test_single_aspect_when_no_singular_set(atlas6):
    a = atlas6.aspects[0]
    at = R.RegionAtlas(G, atlas6.config)
    at.workspace = a.octree
    at.singular_set = Octree.empty(atlas6.wbox, atlas6.depth)
    out = R.compute_aspects(at)
    assert len(out) == 1 and out[0].sign == a.sign


def test_mixed_signs_without_singular_set_raise(atlas6):
    at = R.RegionAtlas(G, atlas6.config)
    at.workspace = atlas6.workspace
    at.singular_set = Octree.empty(atlas6.wbox, atlas6.depth)
    with pytest.raises(R.SignInconsistency):
        R.compute_aspects(at)


def test_joint_cells_have_uniform_counts(atlas6):
    scan = atlas6._grid["scan"]
    jc = atlas6._grid["jcell"]
    for c in atlas6.joint_cells:
        vals = np.unique(scan.counts[jc == c["id"]])
        assert list(vals) == [c["count"]]
    assert {c["count"] for c in atlas6.joint_cells} <= {2, 4, 6}


def test_overlap_matrix_consistent(atlas6):
    M = atlas6.overlap
    assert np.array_equal(M, M.T)
    assert np.all(M <= np.minimum.outer(np.diag(M), np.diag(M)))
    members = sorted(r for c in atlas6.coincidence_classes for r in c.members)
    assert members == list(range(len(atlas6.basic_regions)))


def test_uniqueness_per_region(atlas6):
    """Never two assembly modes of one joint vector in the same basic region."""
    res = R.dkp_multiplicity_map(atlas6, samples=500, seed=5)
    poses, cnt = kin.solve_dkp_batch(G, res["q"])
    lab = atlas6.region_of(poses.reshape(-1, 3)).reshape(-1, 6)
    lab[np.isnan(poses[:, :, 0])] = -1
    for row in lab:
        r = row[row >= 0]
        assert len(r) == len(set(r.tolist()))


def test_at_most_one_mode_per_domain(atlas6):
    res = R.dkp_multiplicity_map(atlas6, samples=2000, seed=6)
    poses, cnt = kin.solve_dkp_batch(G, res["q"])
    flat = poses.reshape(-1, 3)
    ok = np.isfinite(flat[:, 0])
    reg = np.full(len(flat), -1)
    reg[ok] = atlas6.region_of(flat[ok])
    reg = reg.reshape(-1, 6)
    shared = 0
    for d in atlas6.uniqueness_domains:
        # exact on the member regions
        in_regions = np.isin(reg, d.regions).sum(axis=1)
        assert in_regions.max() <= 1
        # the bridge cells between members are a voxel thick
        inside = np.zeros(len(flat), dtype=bool)
        inside[ok] = d.octree.contains_points(flat[ok])
        shared += int(np.sum(inside.reshape(-1, 6).sum(axis=1) > 1))
    assert shared <= 2


def test_domains_partition_regions(atlas6):
    ids = sorted(r for d in atlas6.uniqueness_domains for r in d.regions)
    assert ids == list(range(len(atlas6.basic_regions)))
    for d in atlas6.uniqueness_domains:
        assert components(d.octree).count == 1
        for i in d.regions:
            for j in d.regions:
                if i < j:
                    assert R._disjoint(atlas6, i, j)


def test_min_partition_small_graphs():
    # path 0-1-2 with 0 and 2 incompatible: at least two groups needed
    got = R._min_partition([0, 1, 2], {(0, 1), (1, 2)}, lambda i, j: {i, j} != {0, 2})
    assert len(got) == 2 and sorted(sum(got, [])) == [0, 1, 2]
    # all compatible but disconnected
    got = R._min_partition([0, 1, 2], {(0, 1)}, lambda i, j: True)
    assert sorted(map(sorted, got)) == [[0, 1], [2]]


def test_bounds_enclose_leg_lengths():
    rng = np.random.default_rng(7)
    lo = rng.uniform([-30, -30, -math.pi], [25, 25, 2.5], size=(500, 3))
    hi = lo + rng.uniform(0.01, 5, size=(500, 3))
    rmin, rmax = R.leg_length_bounds(G, lo, hi)
    for i in range(500):
        X = rng.uniform(lo[i], hi[i], size=(50, 3))
        q = kin.inverse_kinematics_batch(G, X)
        assert np.all(q >= rmin[i] - 1e-9) and np.all(q <= rmax[i] + 1e-9)


def test_build_atlas_rejects_unknown_stage():
    with pytest.raises(ValueError):
        R.build_atlas(G, R.AtlasConfig(depth=3), stage="everything")
