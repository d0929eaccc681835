import itertools
import math

import numpy as np
import pytest

from common import G, Q_REF, REF_POSES
from rpratlas import kinematics as kin
from rpratlas.kinematics import Pose
from rpratlas.trajectory import (
    WorkspacePath,
    default_step,
    detA_margin,
    find_mode_change_path,
    path_from_csv,
    path_regions,
    path_to_csv,
    sample_polyline,
    trace_joint_trajectory,
    verify_path,
)


def polished_rows():
    """Reference poses refined onto the exact solutions of the joint vector."""
    sols = kin.solve_dkp(G, Q_REF)
    out = []
    for p in REF_POSES:
        d = [np.linalg.norm(np.r_[s.x - p.x, s.y - p.y, kin.wrap_angle(s.phi - p.phi)]) for s in sols]
        out.append(sols[int(np.argmin(d))])
    return out


ROWS = polished_rows()


def independent_check(g, P, margin):
    """Dense resampling at a tenth of the step, no shared code beyond the model."""
    S = [P[0]]
    for a, b in zip(P, P[1:]):
        d = b - a
        d[2] = (d[2] + math.pi) % (2 * math.pi) - math.pi
        k = 400
        t = np.linspace(0, 1, k + 1)[1:, None]
        S.extend(a + t * d)
    S = np.array(S)
    det = kin.det_a_batch(g, S)
    q = kin.inverse_kinematics_batch(g, S)
    lim = np.all((q >= np.array(g.rho_min)) & (q <= np.array(g.rho_max)), axis=1)
    return bool(np.all(np.sign(det) == np.sign(det[0])) and lim.all() and np.abs(det).min() >= 0.5 * margin)


def test_margin_positive_and_cached():
    m = detA_margin(G)
    assert m > 0
    assert detA_margin(G) == m


def test_sampling_respects_step():
    P = np.array([[0.0, 0.0, 3.0], [1.0, 0.0, -3.0]])
    S = sample_polyline(G, P, 0.01)
    assert np.allclose(S[0], P[0]) and np.allclose(S[-1], P[-1])
    # phi takes the short way across the seam
    assert np.all(np.abs(S[:, 2]) >= 3.0)
    d = np.diff(S, axis=0)
    d[:, 2] = kin.wrap_angle(d[:, 2]) * G.reach / math.pi
    assert np.linalg.norm(d, axis=1).max() <= 0.01 + 1e-12


def test_path_validation():
    with pytest.raises(ValueError):
        WorkspacePath((Pose(0, 0, 0), Pose(0, 0, 0)), 0.1)
    with pytest.raises(ValueError):
        WorkspacePath((Pose(0, 0, 0),), 0.0)
    with pytest.raises(ValueError):
        verify_path(G, WorkspacePath((), 0.1))


def test_constant_path_valid():
    rep = verify_path(G, WorkspacePath((ROWS[1],), 0.1))
    assert rep.valid and rep.samples == 1 and rep.sign_changes == 0


def test_straight_line_across_aspects_invalid():
    p = WorkspacePath((ROWS[1], ROWS[0]), 0.05)
    rep = verify_path(G, p)
    assert not rep.valid
    assert rep.sign_changes >= 1 or rep.limit_violations
    with pytest.raises(ValueError):
        trace_joint_trajectory(G, p)


def test_report_text():
    rep = verify_path(G, WorkspacePath((ROWS[1],), 0.1))
    lines = rep.as_text().splitlines()
    assert lines[0] == "valid: true"
    assert {ln.split(":")[0] for ln in lines} >= {"valid", "min_abs_detA", "margin", "sign_changes"}


@pytest.mark.parametrize("i,j", list(itertools.combinations([1, 2, 5], 2)))
def test_mode_change_within_aspect(atlas6, i, j):
    m = detA_margin(G)
    p = find_mode_change_path(atlas6, G, ROWS[i], ROWS[j])
    assert p is not None
    assert p.waypoints[0] == ROWS[i] and p.waypoints[-1] == ROWS[j]
    rep = verify_path(G, p)
    assert rep.valid and rep.min_abs_detA >= m
    assert independent_check(G, p.as_array(), m)
    # start and goal share the joint vector: the trajectory closes
    q = np.array([v.as_array() for v in trace_joint_trajectory(G, p)])
    assert np.abs(q[0] - np.array(Q_REF)).max() < 1e-6
    assert np.abs(q[-1] - np.array(Q_REF)).max() < 1e-6
    assert np.all(q >= np.array(G.rho_min)) and np.all(q <= np.array(G.rho_max))
    # continuity: IK is smooth, so a small step in pose is a small step in q
    assert np.abs(np.diff(q, axis=0)).max() < 20 * p.step


def test_mode_change_crosses_regions(atlas6):
    p = find_mode_change_path(atlas6, G, ROWS[1], ROWS[5])
    seq = path_regions(atlas6, G, p)
    a, b = atlas6.region_of(np.array([ROWS[1].as_array(), ROWS[5].as_array()]))
    assert a != b and seq[0] == a and seq[-1] == b
    # with no shared boundary an intermediate region is unavoidable
    assert len(seq) >= (2 if (min(a, b), max(a, b)) in atlas6.region_adjacency else 3)


@pytest.mark.parametrize("i,j", [(0, 1), (1, 0), (3, 2), (5, 4)])
def test_cross_aspect_refused(atlas6, i, j):
    si = np.sign(kin.det_a(G, ROWS[i]))
    sj = np.sign(kin.det_a(G, ROWS[j]))
    assert si != sj
    assert find_mode_change_path(atlas6, G, ROWS[i], ROWS[j]) is None


def test_endpoint_outside_workspace(atlas6):
    with pytest.raises(ValueError):
        find_mode_change_path(atlas6, G, Pose(0, 0, 0), ROWS[1])


def test_default_step_quarter_leaf():
    assert default_step(G, 6) == pytest.approx(0.25 * 2 * G.reach / 64)


def test_csv_round_trip():
    p = WorkspacePath((ROWS[1], ROWS[2], ROWS[5]), 0.1)
    back = path_from_csv(path_to_csv(p), 0.1)
    assert np.allclose(back.as_array(), p.as_array(), rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("text", ["", "1,2\n", "1,2,x\n", "1,2,nan\n", "# only a comment\n"])
def test_csv_malformed(text):
    with pytest.raises(ValueError):
        path_from_csv(text, 0.1)
