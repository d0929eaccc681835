"""Closed-form kinematics of the planar 3-RPR parallel manipulator.

Leg ``i`` joins the fixed base point ``A_i`` to the platform point ``B_i``.
The platform reference point is ``B1 = (x, y)`` and ``B2``, ``B3`` are
carried by the platform frame rotated by ``phi``.  The constraint residual
is ``F_i = rho_i**2 - |A_i B_i(X)|**2``.

Scalar entry points work on :class:`Pose` / :class:`JointVector`; the
``*_batch`` functions take ``(N, 3)`` arrays and are what the region
builders use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(phi):
    """Map angles to ``[-pi, pi)``.  Works on floats and arrays."""
    out = np.mod(np.asarray(phi, dtype=float) + math.pi, TWO_PI) - math.pi
    # mod can round up to exactly 2*pi for tiny negative inputs
    out = np.where(out >= math.pi, out - TWO_PI, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])

    def __iter__(self):
        return iter((self.x, self.y, self.phi))


@dataclass(frozen=True)
class JointVector:
    rho1: float
    rho2: float
    rho3: float

    def __post_init__(self):
        vals = [float(v) for v in (self.rho1, self.rho2, self.rho3)]
        if any(not math.isfinite(v) or v < 0.0 for v in vals):
            raise ValueError(f"joint lengths must be finite and >= 0, got {vals}")
        object.__setattr__(self, "rho1", vals[0])
        object.__setattr__(self, "rho2", vals[1])
        object.__setattr__(self, "rho3", vals[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.rho1, self.rho2, self.rho3])

    def __iter__(self):
        return iter((self.rho1, self.rho2, self.rho3))


def _pair(v) -> tuple[float, float]:
    a, b = v
    return (float(a), float(b))


def _triple(v) -> tuple[float, float, float]:
    if np.ndim(v) == 0:
        return (float(v),) * 3
    a, b, c = v
    return (float(a), float(b), float(c))


@dataclass(frozen=True)
class Geometry:
    """Base anchors, platform triangle and actuator limits.

    ``l2 = |B1B2|``, ``l3 = |B1B3|`` and ``theta`` is the platform angle at
    ``B1`` measured counterclockwise from ``B1B2`` to ``B1B3``.  Joint limits
    are per-joint tuples; a scalar is broadcast to all three legs.
    """

    a1: tuple[float, float] = (0.0, 0.0)
    a2: tuple[float, float] = (15.91, 0.0)
    a3: tuple[float, float] = (0.0, 10.0)
    l2: float = 17.04
    l3: float = 20.84
    theta: float = field(default_factory=lambda: platform_angle(17.04, 16.54, 20.84))
    rho_min: tuple[float, float, float] = (10.0, 10.0, 10.0)
    rho_max: tuple[float, float, float] = (32.0, 32.0, 32.0)

    def __post_init__(self):
        object.__setattr__(self, "a1", _pair(self.a1))
        object.__setattr__(self, "a2", _pair(self.a2))
        object.__setattr__(self, "a3", _pair(self.a3))
        object.__setattr__(self, "l2", float(self.l2))
        object.__setattr__(self, "l3", float(self.l3))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "rho_min", _triple(self.rho_min))
        object.__setattr__(self, "rho_max", _triple(self.rho_max))
        if not (self.l2 > 0 and self.l3 > 0):
            raise ValueError("platform side lengths must be positive")
        if not (0.0 < self.theta < math.pi):
            raise ValueError("platform angle must lie in (0, pi)")
        for lo, hi in zip(self.rho_min, self.rho_max):
            if not (0.0 <= lo < hi):
                raise ValueError(f"invalid joint limits [{lo}, {hi}]")
        s23 = self.side23
        if not (s23 < self.l2 + self.l3 and self.l2 < s23 + self.l3 and self.l3 < s23 + self.l2):
            raise ValueError("platform sides violate the triangle inequality")

    @classmethod
    def from_sides(cls, b1b2: float, b2b3: float, b3b1: float, **kw) -> "Geometry":
        return cls(l2=b1b2, l3=b3b1, theta=platform_angle(b1b2, b2b3, b3b1), **kw)

    @property
    def side23(self) -> float:
        return math.sqrt(self.l2**2 + self.l3**2 - 2 * self.l2 * self.l3 * math.cos(self.theta))

    @property
    def bases(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.a3])

    @property
    def platform(self) -> np.ndarray:
        """Platform points in the moving frame, ``B1`` at the origin."""
        return np.array(
            [
                [0.0, 0.0],
                [self.l2, 0.0],
                [self.l3 * math.cos(self.theta), self.l3 * math.sin(self.theta)],
            ]
        )

    @property
    def reach(self) -> float:
        return max(self.rho_max)

    @property
    def det_scale(self) -> float:
        """Typical magnitude of ``det(A)``; used to make tolerances scale-free."""
        return 8.0 * self.reach**3 * max(self.l2, self.l3)

    @property
    def tol_dkp(self) -> float:
        return 1e-9 * self.reach**2

    @property
    def tol_pose_xy(self) -> float:
        return 1e-7 * self.reach

    tol_pose_phi = 1e-7


def platform_angle(b1b2: float, b2b3: float, b3b1: float) -> float:
    """Angle at ``B1`` of the platform triangle from its three sides."""
    c = (b1b2**2 + b3b1**2 - b2b3**2) / (2.0 * b1b2 * b3b1)
    if not -1.0 < c < 1.0:
        raise ValueError("sides do not form a non-degenerate triangle")
    return math.acos(c)


# --------------------------------------------------------------------------
# vectorised core

def _as_poses(X) -> np.ndarray:
    if isinstance(X, Pose):
        return X.as_array()[None, :]
    arr = np.asarray(X, dtype=float)
    return arr.reshape(-1, 3)


def _as_joints(q) -> np.ndarray:
    if isinstance(q, JointVector):
        return q.as_array()[None, :]
    return np.asarray(q, dtype=float).reshape(-1, 3)


def platform_points(g: Geometry, X) -> np.ndarray:
    """World coordinates of ``B1, B2, B3`` for each pose, shape ``(N, 3, 2)``."""
    X = _as_poses(X)
    c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
    b = g.platform
    bx = X[:, 0, None] + c[:, None] * b[None, :, 0] - s[:, None] * b[None, :, 1]
    by = X[:, 1, None] + s[:, None] * b[None, :, 0] + c[:, None] * b[None, :, 1]
    return np.stack([bx, by], axis=-1)


def leg_vectors(g: Geometry, X) -> np.ndarray:
    """``B_i - A_i`` for each pose, shape ``(N, 3, 2)``."""
    return platform_points(g, X) - g.bases[None, :, :]


def inverse_kinematics_batch(g: Geometry, X) -> np.ndarray:
    u = leg_vectors(g, X)
    return np.hypot(u[..., 0], u[..., 1])


def residual_batch(g: Geometry, q, X) -> np.ndarray:
    q = _as_joints(q)
    u = leg_vectors(g, X)
    return q**2 - (u[..., 0] ** 2 + u[..., 1] ** 2)


def a_matrix_batch(g: Geometry, X) -> np.ndarray:
    """``dF/dX`` for each pose, shape ``(N, 3, 3)``.  Independent of ``q``."""
    X = _as_poses(X)
    B = platform_points(g, X)
    u = B - g.bases[None]
    e = B - B[:, :1, :]
    moment = e[..., 0] * u[..., 1] - e[..., 1] * u[..., 0]
    return -2.0 * np.stack([u[..., 0], u[..., 1], moment], axis=-1)


def det_a_batch(g: Geometry, X) -> np.ndarray:
    return np.linalg.det(a_matrix_batch(g, X))


# --------------------------------------------------------------------------
# scalar API

def inverse_kinematics(g: Geometry, X: Pose) -> JointVector:
    return JointVector(*inverse_kinematics_batch(g, X)[0])


def within_limits(g: Geometry, q) -> bool:
    q = np.asarray(tuple(q), dtype=float)
    return bool(np.all(q >= np.asarray(g.rho_min)) and np.all(q <= np.asarray(g.rho_max)))


def within_limits_batch(g: Geometry, q) -> np.ndarray:
    q = _as_joints(q)
    return np.all((q >= np.asarray(g.rho_min)) & (q <= np.asarray(g.rho_max)), axis=1)


def residual(g: Geometry, q, X: Pose) -> np.ndarray:
    return residual_batch(g, tuple(q), tuple(X))[0]


@dataclass(frozen=True)
class JacobianPair:
    a_matrix: np.ndarray
    b_matrix: np.ndarray


def jacobians(g: Geometry, q, X: Pose) -> JacobianPair:
    q = np.asarray(tuple(q), dtype=float)
    return JacobianPair(a_matrix_batch(g, tuple(X))[0], np.diag(2.0 * q))


def det_a(g: Geometry, X: Pose) -> float:
    return float(det_a_batch(g, tuple(X))[0])


class _IdenticallyZero:
    """Returned by :func:`singular_y` when ``det(A)`` vanishes for every ``y``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "IDENTICALLY_ZERO"

    def __bool__(self):
        return True


IDENTICALLY_ZERO = _IdenticallyZero()


def det_a_y_coefficients(g: Geometry, x, phi) -> np.ndarray:
    """Coefficients ``(c0, c1, c2)`` with ``det A = c0 + c1*y + c2*y**2``.

    ``det(A)`` is exactly quadratic in ``y`` for fixed ``(x, phi)``: the
    first column of ``A`` does not depend on ``y`` and the other two are
    affine in it.  Three evaluations therefore recover it exactly.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    x, phi = np.broadcast_arrays(x, phi)
    ys = (-1.0, 0.0, 1.0)
    d = [det_a_batch(g, np.stack([x, np.full_like(x, y), phi], axis=-1)) for y in ys]
    c0 = d[1]
    c1 = 0.5 * (d[2] - d[0])
    c2 = 0.5 * (d[2] + d[0]) - d[1]
    return np.stack([c0, c1, c2], axis=-1)


def _quadratic_roots(c0, c1, c2, zero_tol):
    """Real roots of ``c0 + c1*y + c2*y**2`` row-wise, NaN padded to 2."""
    n = c0.shape[0]
    out = np.full((n, 2), np.nan)
    quad = np.abs(c2) > zero_tol
    disc = c1 * c1 - 4.0 * c0 * c2
    ok = quad & (disc >= 0.0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable pairing
    qq = -0.5 * (c1 + np.where(c1 >= 0.0, sq, -sq))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = qq / c2
        r2 = np.where(qq != 0.0, c0 / qq, r1)
    out[ok, 0] = np.minimum(r1, r2)[ok]
    out[ok, 1] = np.maximum(r1, r2)[ok]
    lin = ~quad & (np.abs(c1) > zero_tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[lin, 0] = (-c0 / c1)[lin]
    return out


def singular_y_batch(g: Geometry, x, phi) -> np.ndarray:
    """All ``y`` with ``det A(x, y, phi) == 0``, shape ``(N, 2)``, NaN padded.

    Columns where ``det(A)`` is identically zero in ``y`` give two NaNs; use
    :func:`singular_y` for the explicit signal.
    """
    c = det_a_y_coefficients(g, x, phi)
    scale = g.det_scale
    # coefficient of y**k is compared against scale / reach**k
    zero_tol = 1e-13 * scale / g.reach**2
    roots = _quadratic_roots(c[:, 0], c[:, 1], c[:, 2], zero_tol)
    # one Newton step on the exact determinant tightens the roots
    for k in range(2):
        y = roots[:, k]
        ok = np.isfinite(y)
        if not ok.any():
            continue
        xx, yy, pp = np.broadcast_arrays(np.atleast_1d(x), y, np.atleast_1d(phi))
        P = np.stack([xx[ok], yy[ok], pp[ok]], axis=-1)
        f = det_a_batch(g, P)
        df = c[ok, 1] + 2.0 * c[ok, 2] * P[:, 1]
        step = np.where(np.abs(df) > 0, f / np.where(df == 0, 1.0, df), 0.0)
        y = y.copy()
        y[ok] = P[:, 1] - step
        roots[:, k] = y
    return roots


def singular_y(g: Geometry, x: float, phi: float):
    """Roots in ``y`` of ``det A(x, y, phi)``.

    Returns a sorted list of floats, or ``IDENTICALLY_ZERO`` if the
    determinant vanishes for every ``y`` at this ``(x, phi)``.
    """
    c = det_a_y_coefficients(g, x, phi)[0]
    tol = 1e-13 * g.det_scale
    if abs(c[0]) < tol and abs(c[1]) * g.reach < tol and abs(c[2]) * g.reach**2 < tol:
        return IDENTICALLY_ZERO
    roots = singular_y_batch(g, x, phi)[0]
    return sorted(float(r) for r in roots if np.isfinite(r))


# --------------------------------------------------------------------------
# direct kinematics

class DegenerateConfiguration(ArithmeticError):
    """The elimination hit a singular 2x2 system and the root could not be recovered."""


def _lin_to_t(alpha, beta, gamma):
    """``alpha*cos + beta*sin + gamma`` times ``(1+t^2)`` as ascending t-coeffs."""
    return np.stack([gamma + alpha, 2.0 * beta, gamma - alpha], axis=-1)


def _polymul(p, q):
    n, m = p.shape[-1], q.shape[-1]
    out = np.zeros(p.shape[:-1] + (n + m - 1,))
    for i in range(n):
        out[..., i : i + m] += p[..., i, None] * q
    return out


def _elimination_terms(g: Geometry, q: np.ndarray):
    """Trig-linear coefficients of the 2x2 system ``M(phi) B1 = r(phi)/2``.

    Each entry is an array ``(alpha, beta, gamma)`` of shape ``(3, N)`` for
    ``alpha*cos(phi) + beta*sin(phi) + gamma``.
    """
    a1 = np.asarray(g.a1)
    b = g.platform
    n = q.shape[0]
    ones = np.ones(n)
    rows = []
    for i in (1, 2):
        ai = np.asarray(g.bases[i])
        bx, by = b[i]
        dx = np.array([bx * ones, -by * ones, (a1[0] - ai[0]) * ones])
        dy = np.array([by * ones, bx * ones, (a1[1] - ai[1]) * ones])
        const = q[:, i] ** 2 - q[:, 0] ** 2 - (bx * bx + by * by) - ai @ ai + a1 @ a1
        r = np.array(
            [
                2.0 * (ai[0] * bx + ai[1] * by) * ones,
                2.0 * (ai[1] * bx - ai[0] * by) * ones,
                const,
            ]
        )
        rows.append((dx, dy, 0.5 * r))
    return rows


def _eval_lin(coef, c, s):
    return coef[0] * c + coef[1] * s + coef[2]


def _solve_xy(g: Geometry, q: np.ndarray, phi: np.ndarray):
    """Solve the linear pair for ``(x, y)`` at each ``phi``; also return det."""
    (d2x, d2y, r2), (d3x, d3y, r3) = _elimination_terms(g, q)
    c, s = np.cos(phi), np.sin(phi)
    m11, m12 = _eval_lin(d2x, c, s), _eval_lin(d2y, c, s)
    m21, m22 = _eval_lin(d3x, c, s), _eval_lin(d3y, c, s)
    h2, h3 = _eval_lin(r2, c, s), _eval_lin(r3, c, s)
    det = m11 * m22 - m12 * m21
    with np.errstate(divide="ignore", invalid="ignore"):
        x = (h2 * m22 - h3 * m12) / det
        y = (m11 * h3 - m21 * h2) / det
    return x, y, det


def dkp_polynomial(g: Geometry, q) -> np.ndarray:
    """Ascending coefficients of the degree-6 polynomial in ``t = tan(phi/2)``.

    Subtracting the first leg equation from the other two leaves a system
    linear in ``(x, y)``; substituting its solution back into the first
    equation yields a trigonometric polynomial of degree 3 in ``phi``.
    Returned shape is ``(N, 7)``.
    """
    q = _as_joints(q)
    (d2x, d2y, r2), (d3x, d3y, r3) = _elimination_terms(g, q)
    T = lambda coef: _lin_to_t(*coef)  # noqa: E731
    m11, m12, m21, m22 = T(d2x), T(d2y), T(d3x), T(d3y)
    h2, h3 = T(r2), T(r3)
    det = _polymul(m11, m22) - _polymul(m12, m21)
    nx = _polymul(h2, m22) - _polymul(h3, m12)
    ny = _polymul(m11, h3) - _polymul(m21, h2)
    a1x, a1y = g.a1
    ex = nx - a1x * det
    ey = ny - a1y * det
    p8 = _polymul(ex, ex) + _polymul(ey, ey) - (q[:, 0] ** 2)[:, None] * _polymul(det, det)
    # exact division by (1 + t^2): the cos(4 phi) harmonics cancel
    p6 = np.zeros(p8.shape[:-1] + (7,))
    p6[..., 6] = p8[..., 8]
    p6[..., 5] = p8[..., 7]
    for k in range(4, -1, -1):
        p6[..., k] = p8[..., k + 2] - p6[..., k + 2]
    return p6


def dkp_trig(g: Geometry, q, phi) -> np.ndarray:
    """The eliminated equation evaluated directly in ``phi`` (no half-angle)."""
    q = _as_joints(q)
    x, y, det = _solve_xy(g, q, phi)
    a1x, a1y = g.a1
    return ((x - a1x) ** 2 + (y - a1y) ** 2 - q[:, 0] ** 2) * det**2


def _companion_roots(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex roots in ``phi``-space of each polynomial row.

    Uses the monic form in ``t`` when the leading coefficient dominates and
    the reversed polynomial in ``u = 1/t`` otherwise, so a root at
    ``phi = pi`` (``t`` infinite, ``u = 0``) is found without overflow.
    Returns ``(z, reversed_flag)`` where ``z`` has shape ``(N, 6)``.
    """
    n, m = p.shape
    deg = m - 1
    scale = np.max(np.abs(p), axis=1)
    scale = np.where(scale == 0.0, 1.0, scale)
    flip = np.abs(p[:, deg]) < np.abs(p[:, 0])
    work = np.where(flip[:, None], p[:, ::-1], p) / scale[:, None]
    lead = work[:, deg]
    lead = np.where(lead == 0.0, np.finfo(float).tiny, lead)
    comp = np.zeros((n, deg, deg))
    comp[:, 0, :] = -work[:, deg - 1 :: -1] / lead[:, None]
    idx = np.arange(deg - 1)
    comp[:, idx + 1, idx] = 1.0
    z = np.linalg.eigvals(comp)
    return z, flip


def _candidate_phis(g: Geometry, q: np.ndarray, real_tol: float = 1e-6):
    """Real candidate angles from the sextic; NaN where complex."""
    p = dkp_polynomial(g, q)
    z, flip = _companion_roots(p)
    near_real = np.abs(z.imag) <= real_tol * (1.0 + np.abs(z.real))
    zr = z.real
    # t = 1/u for flipped rows; atan2 form handles u == 0 (phi = pi)
    phi = np.where(flip[:, None], 2.0 * np.arctan2(1.0, zr), 2.0 * np.arctan(zr))
    phi = np.where(near_real, wrap_angle(phi), np.nan)
    return phi


def _newton_polish(g: Geometry, q: np.ndarray, X: np.ndarray, iters: int = 30) -> np.ndarray:
    """Damped Gauss-Newton on the full residual, ``q``/``X`` shape ``(M, 3)``."""
    X = X.copy()
    reg = 1e-24 * g.det_scale**2
    tiny = np.finfo(float).eps * g.reach**2
    for _ in range(iters):
        F = residual_batch(g, q, X)
        if np.all(np.abs(F) <= tiny * 16.0):
            break
        A = a_matrix_batch(g, X)
        At = np.swapaxes(A, 1, 2)
        lhs = At @ A + reg * np.eye(3)
        rhs = -(At @ F[..., None])
        dX = np.linalg.solve(lhs, rhs)[..., 0]
        X = X + dX
        X[:, 2] = wrap_angle(X[:, 2])
    return X


def _dedupe_sorted(sol: np.ndarray, valid: np.ndarray, tol_xy: float, tol_phi: float):
    """Drop near-identical rows per query; sort survivors by (x, y, phi)."""
    n, k, _ = sol.shape
    out = np.full_like(sol, np.nan)
    counts = np.zeros(n, dtype=int)
    key = np.where(valid, sol[..., 0], np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    sol = np.take_along_axis(sol, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    for j in range(k):
        cand = sol[:, j]
        keep = valid[:, j].copy()
        for m in range(j):
            prev_ok = valid[:, m]
            dphi = np.abs(wrap_angle(cand[:, 2] - sol[:, m, 2]))
            dup = (
                prev_ok
                & (np.abs(cand[:, 0] - sol[:, m, 0]) <= tol_xy)
                & (np.abs(cand[:, 1] - sol[:, m, 1]) <= tol_xy)
                & (dphi <= tol_phi)
            )
            keep &= ~dup
        valid[:, j] = keep
    for j in range(k):
        rows = np.nonzero(valid[:, j])[0]
        out[rows, counts[rows]] = sol[rows, j]
        counts[rows] += 1
    # lexicographic order of kept rows; x ties are broken by y then phi
    for i in np.nonzero(counts > 1)[0]:
        c = counts[i]
        blk = out[i, :c]
        out[i, :c] = blk[np.lexsort((blk[:, 2], blk[:, 1], blk[:, 0]))]
    return out, counts


def solve_dkp_batch(g: Geometry, q, polish: bool = True, merge_tol: float | None = None):
    """All real direct-kinematic solutions for each joint vector.

    Returns ``(poses, counts)`` where ``poses`` has shape ``(N, 6, 3)``
    (NaN padded) and ``counts`` the number of solutions per row.  With
    ``polish`` the roots are refined by Newton on the full residual and
    rows failing ``tol_dkp`` are discarded; without it the raw eliminated
    roots are returned (cheaper, adequate for counting).
    """
    q = _as_joints(q)
    n = q.shape[0]
    phi = _candidate_phis(g, q)
    qq = np.repeat(q, 6, axis=0)
    ph = phi.reshape(-1)
    ok = np.isfinite(ph)
    x, y, det = _solve_xy(g, qq, np.where(ok, ph, 0.0))
    lin_scale = 4.0 * g.reach**2 * max(g.l2, g.l3) ** 2
    degen = ok & (np.abs(det) < 1e-12 * lin_scale)
    if degen.any():
        # parallel leg-difference lines: nudge phi off the measure-zero set
        ph2 = ph[degen] + 1e-9
        x2, y2, _ = _solve_xy(g, qq[degen], ph2)
        x[degen], y[degen] = x2, y2
    X = np.stack([x, y, ph], axis=-1)
    ok &= np.all(np.isfinite(X), axis=1)
    if polish and ok.any():
        X[ok] = _newton_polish(g, qq[ok], X[ok])
        F = np.full(X.shape[0], np.inf)
        F[ok] = np.max(np.abs(residual_batch(g, qq[ok], X[ok])), axis=1)
        ok &= F <= g.tol_dkp
    tol_xy = g.tol_pose_xy if merge_tol is None else merge_tol * g.reach
    tol_phi = g.tol_pose_phi if merge_tol is None else merge_tol
    sol = X.reshape(n, 6, 3)
    return _dedupe_sorted(sol, ok.reshape(n, 6), tol_xy, tol_phi)


def dkp_count_batch(g: Geometry, q) -> np.ndarray:
    """Number of real direct-kinematic solutions, without polishing."""
    q = _as_joints(q)
    phi = _candidate_phis(g, q)
    _, counts = _dedupe_sorted_phi(phi)
    return counts


def _dedupe_sorted_phi(phi: np.ndarray, tol: float = 1e-9):
    """Count distinct finite angles per row (wrap-aware)."""
    ph = np.sort(np.where(np.isfinite(phi), phi, np.inf), axis=1)
    fin = np.isfinite(ph)
    with np.errstate(invalid="ignore"):
        gaps = np.diff(ph, axis=1)
    distinct = fin.copy()
    distinct[:, 1:] &= ~(fin[:, :-1] & (gaps <= tol))
    # wrap: the largest angle near pi and smallest near -pi are the same root
    cnt = distinct.sum(axis=1)
    last = np.where(fin, ph, -np.inf).max(axis=1)
    first = ph[:, 0]
    wrap_dup = (cnt > 1) & (TWO_PI - (last - first) <= tol)
    return ph, cnt - wrap_dup.astype(int)


def solve_dkp(g: Geometry, q, tol_dkp: float | None = None,
              tol_pose: tuple[float, float] | None = None) -> list[Pose]:
    """All real poses assembling the given joint vector, sorted by (x, y, phi).

    ``tol_dkp`` (residual acceptance) and ``tol_pose`` (``(xy, phi)`` merge
    distances) default to the geometry's scale-based values.  Raises ``ValueError`` if any length is not strictly positive and
    :class:`DegenerateConfiguration` if a candidate root sits on a singular
    elimination system and cannot be recovered by polishing.
    """
    qa = np.asarray(tuple(q), dtype=float)
    if qa.shape != (3,) or not np.all(qa > 0.0):
        raise ValueError(f"direct kinematics needs strictly positive lengths, got {qa}")
    phis = _candidate_phis(g, qa[None])[0]
    cand = phis[np.isfinite(phis)]
    lin_scale = 4.0 * g.reach**2 * max(g.l2, g.l3) ** 2
    sols = []
    for ph in cand:
        x, y, det = (v[0] for v in _solve_xy(g, qa[None], np.array([ph])))
        degenerate = abs(det) < 1e-12 * lin_scale
        if degenerate:
            x, y, _ = (v[0] for v in _solve_xy(g, qa[None], np.array([ph + 1e-9])))
        X = np.array([[x, y, ph]])
        if not np.all(np.isfinite(X)):
            if degenerate:
                raise DegenerateConfiguration(f"singular elimination at phi={ph:.12g}")
            continue
        X = _newton_polish(g, qa[None], X)
        err = np.max(np.abs(residual_batch(g, qa, X)))
        if err > (g.tol_dkp if tol_dkp is None else tol_dkp):
            if degenerate:
                raise DegenerateConfiguration(f"polish failed at phi={ph:.12g} (|F|={err:.3g})")
            continue
        sols.append(X[0])
    if not sols:
        return []
    arr = np.array(sols)[None]
    txy, tph = (g.tol_pose_xy, g.tol_pose_phi) if tol_pose is None else tol_pose
    out, cnt = _dedupe_sorted(arr, np.ones(arr.shape[:2], bool), txy, tph)
    return [Pose(*row) for row in out[0, : cnt[0]]]
