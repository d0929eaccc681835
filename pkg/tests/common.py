"""Reference values and oracles shared by the test modules."""
import math

import numpy as np

from rpratlas import kinematics as kin
from rpratlas.kinematics import Geometry, Pose, residual

G = Geometry()
Q_REF = (14.98, 15.38, 12.0)
# printed to three decimals
REF_ROWS = [
    (-8.715, 12.183, -0.987),
    (-5.495, -13.935, -0.047),
    (-14.894, 1.596, 0.244),
    (-13.417, -6.660, 0.585),
    (14.920, -1.337, 1.001),
    (14.673, -3.013, 2.133),
]
REF_POSES = [Pose(*r) for r in REF_ROWS]


def reachable_poses(n, seed=0, margin=0.0):
    """Uniform poses of the workspace by rejection, optionally away from det A = 0."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < n:
        X = rng.uniform([-32, -32, -math.pi], [32, 32, math.pi], size=(4 * n, 3))
        q = kin.inverse_kinematics_batch(G, X)
        ok = kin.within_limits_batch(G, q)
        if margin:
            ok &= np.abs(kin.det_a_batch(G, X)) > margin * G.det_scale
        out.append(X[ok])
    return np.concatenate(out)[:n]


def fd_jacobians(g, q, X, h=1e-6):
    """Central differences of the residual in X and in q."""
    q = np.asarray(q, float)
    X = np.asarray(X, float)
    A = np.zeros((3, 3))
    B = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        A[:, j] = (residual(g, q, Pose(*(X + e))) - residual(g, q, Pose(*(X - e)))) / (2 * h)
        B[:, j] = (residual(g, q + e, Pose(*X)) - residual(g, q - e, Pose(*X))) / (2 * h)
    return A, B
