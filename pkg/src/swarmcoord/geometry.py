"""Bezier trajectory parameterization, ellipsoid obstacles, and scaled-norm distances.

Flattening convention for control-point vectors: segment-major, then control
point, then axis, i.e. w = [s0p0x, s0p0y, s0p0z, s0p1x, ..., s(l-1)p(d)z].
Sampled trajectories U are time-major with axis innermost: U[3k:3k+3] is the
3-D setpoint at sample k.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import comb


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BezierPlan:
    """Piecewise Bezier curve: l segments of degree d, each lasting segment_duration."""

    control_points: np.ndarray  # (l, d+1, 3)
    segment_duration: float

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        if cp.ndim != 3 or cp.shape[2] != 3:
            raise GeometryError(f"control points must be (l, d+1, 3), got {cp.shape}")
        if cp.shape[0] < 1 or cp.shape[1] < 3:
            raise GeometryError("need l >= 1 segments of degree d >= 2")
        if not self.segment_duration > 0:
            raise GeometryError("segment_duration must be positive")
        object.__setattr__(self, "control_points", cp)

    @property
    def num_segments(self):
        return self.control_points.shape[0]

    @property
    def degree(self):
        return self.control_points.shape[1] - 1

    @property
    def total_duration(self):
        return self.num_segments * self.segment_duration

    def flatten(self) -> np.ndarray:
        """Vector w of length 3*l*(d+1) in the documented ordering."""
        return self.control_points.reshape(-1).copy()

    @classmethod
    def from_flat(cls, w, num_segments, degree, segment_duration):
        w = np.asarray(w, dtype=float)
        expected = 3 * num_segments * (degree + 1)
        if w.size != expected:
            raise GeometryError(f"flat vector has {w.size} entries, expected {expected}")
        cp = w.reshape(num_segments, degree + 1, 3)
        return cls(cp, segment_duration)


@dataclass(frozen=True)
class BezierBasis:
    """Linear map F with U = F w for the P sample times of a plan family."""

    matrix: np.ndarray       # (3P, 3l(d+1))
    sample_times: np.ndarray  # (P,)
    num_segments: int
    degree: int
    dt: float

    @property
    def horizon(self):
        return self.sample_times.size

    @property
    def segment_duration(self):
        return self.horizon * self.dt / self.num_segments


@dataclass(frozen=True)
class Ellipsoid:
    """Surface {x : ||E (x - center)||_2 = 1} for an invertible shape matrix E."""

    center: np.ndarray
    shape_matrix: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        e = np.asarray(self.shape_matrix, dtype=float).reshape(3, 3)
        if abs(np.linalg.det(e)) < 1e-12:
            raise GeometryError("ellipsoid shape matrix must be invertible")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape_matrix", e)

    @classmethod
    def axis_aligned(cls, center, semi_axes):
        semi = np.asarray(semi_axes, dtype=float).reshape(3)
        if np.any(semi <= 0):
            raise GeometryError("semi-axes must be positive")
        return cls(np.asarray(center, dtype=float), np.diag(1.0 / semi))


def bernstein_row(degree, tau):
    """Bernstein basis values (B_{0,d}(tau), ..., B_{d,d}(tau))."""
    i = np.arange(degree + 1)
    return comb(degree, i) * tau**i * (1.0 - tau) ** (degree - i)


def _segment_and_tau(plan_duration, segment_duration, num_segments, t):
    if t < -1e-12 or t > plan_duration + 1e-12:
        raise GeometryError(f"time {t} outside [0, {plan_duration}]")
    seg = int(np.floor(t / segment_duration))
    if seg >= num_segments:  # terminal boundary belongs to the last segment
        seg = num_segments - 1
    tau = t / segment_duration - seg
    return seg, min(max(tau, 0.0), 1.0)


def eval_bezier(plan: BezierPlan, t: float) -> np.ndarray:
    """Position on the plan at absolute time t in [0, l*segment_duration]."""
    seg, tau = _segment_and_tau(plan.total_duration, plan.segment_duration,
                                plan.num_segments, t)
    weights = bernstein_row(plan.degree, tau)
    return weights @ plan.control_points[seg]


def build_basis(num_segments, degree, horizon, dt) -> BezierBasis:
    """Sampling matrix for times (1..P)*dt.

    Sample j*dt lands on segment floor(j*dt / segment_duration); the terminal
    time is assigned to the last segment.
    """
    if num_segments < 1 or degree < 1 or horizon < 1 or dt <= 0:
        raise GeometryError("need l >= 1, d >= 1, P >= 1, dt > 0")
    seg_dur = horizon * dt / num_segments
    times = dt * np.arange(1, horizon + 1)
    n_w = 3 * num_segments * (degree + 1)
    f = np.zeros((3 * horizon, n_w))
    for k, t in enumerate(times):
        seg, tau = _segment_and_tau(horizon * dt, seg_dur, num_segments, t)
        weights = bernstein_row(degree, tau)
        for i, wgt in enumerate(weights):
            col0 = 3 * (seg * (degree + 1) + i)
            for ax in range(3):
                f[3 * k + ax, col0 + ax] = wgt
    return BezierBasis(f, times, num_segments, degree, dt)


def derivative_plan(plan: BezierPlan, order: int = 1) -> BezierPlan:
    """Hodograph of the plan: control points d*(p[i+1]-p[i])/T, applied `order` times."""
    if order not in (1, 2):
        raise GeometryError("only first and second derivatives are supported")
    if order > plan.degree:
        raise GeometryError(f"cannot take order-{order} derivative of degree {plan.degree}")
    cp = plan.control_points
    for _ in range(order):
        d = cp.shape[1] - 1
        cp = d * (cp[:, 1:, :] - cp[:, :-1, :]) / plan.segment_duration
    return BezierPlan(cp, plan.segment_duration) if cp.shape[1] >= 3 else _RawDerivative(cp, plan.segment_duration)


class _RawDerivative(BezierPlan):
    """Derivative plans may drop below degree 2; skip that validation only."""

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        if cp.ndim != 3 or cp.shape[2] != 3 or cp.shape[1] < 1:
            raise GeometryError(f"control points must be (l, m, 3), got {cp.shape}")
        if not self.segment_duration > 0:
            raise GeometryError("segment_duration must be positive")
        object.__setattr__(self, "control_points", cp)


def scaled_distance(p, q, shape_matrix) -> float:
    """||E (p - q)||_2 for invertible E."""
    e = np.asarray(shape_matrix, dtype=float).reshape(3, 3)
    if abs(np.linalg.det(e)) < 1e-12:
        raise GeometryError("scaled distance needs an invertible matrix")
    return float(np.linalg.norm(e @ (np.asarray(p, float) - np.asarray(q, float))))


def surface_distance(obs: Ellipsoid, p) -> float:
    """Signed scaled distance to the ellipsoid surface: ||E(p-C)|| - 1 (< 0 inside)."""
    return float(np.linalg.norm(obs.shape_matrix @ (np.asarray(p, float) - obs.center)) - 1.0)


def point_surface_distance(obs: Ellipsoid, p, norm_matrix=None) -> float:
    """Signed distance from p to the ellipsoid surface via the closest point.

    Measured as ||p - c|| in the given norm (Euclidean when norm_matrix is
    None), where c is the radial-projection closest point; negative inside.
    """
    p = np.asarray(p, dtype=float)
    c = closest_point_on_ellipsoid(obs, p)
    offset = p - c
    d = float(np.linalg.norm(offset) if norm_matrix is None
              else np.linalg.norm(np.asarray(norm_matrix, float) @ offset))
    return d if surface_distance(obs, p) >= 0 else -d


def closest_point_on_ellipsoid(obs: Ellipsoid, p) -> np.ndarray:
    """Surface point closest to p in the scaled norm (radial projection in the sphere frame).

    A query exactly at the center maps to the +x-axis point of the sphere frame.
    """
    y = obs.shape_matrix @ (np.asarray(p, float) - obs.center)
    r = np.linalg.norm(y)
    direction = y / r if r > 1e-12 else np.array([1.0, 0.0, 0.0])
    return obs.center + np.linalg.solve(obs.shape_matrix, direction)


def euclidean_project_ellipsoid(obs: Ellipsoid, p, tol=1e-12, max_iter=128) -> np.ndarray:
    """Euclidean projection of p onto the solid ellipsoid (p itself if inside).

    Works in the principal-axis frame of EᵀE and solves the secular equation
    sum_i (a_i y_i / (1 + t a_i))^2 = 1 for the Lagrange parameter t by
    safeguarded Newton (a_i are the eigenvalues of EᵀE).
    """
    p = np.asarray(p, dtype=float)
    m = obs.shape_matrix.T @ obs.shape_matrix
    evals, evecs = np.linalg.eigh(m)
    y = evecs.T @ (p - obs.center)
    if float(np.sum(evals * y**2)) <= 1.0 + tol:
        return p.copy()

    def g(t):
        return float(np.sum(evals * (y / (1.0 + t * evals)) ** 2)) - 1.0

    lo, hi = 0.0, 1.0
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e16:
            raise GeometryError("ellipsoid projection failed to bracket")
    t = hi / 2
    for _ in range(max_iter):
        val = g(t)
        if abs(val) < tol:
            break
        if val > 0:
            lo = t
        else:
            hi = t
        denom = np.sum(-2.0 * evals**2 * y**2 / (1.0 + t * evals) ** 3)
        step = t - val / denom if denom != 0 else t
        t = step if lo < step < hi else 0.5 * (lo + hi)
    x = y / (1.0 + t * evals)
    return obs.center + evecs @ x


def ellipsoid_gap(a: Ellipsoid, b: Ellipsoid, tol=1e-9, max_iter=256) -> float:
    """Euclidean distance between two disjoint ellipsoid surfaces.

    Alternating exact projections onto the two solid (convex) bodies; returns
    0.0 when they intersect.
    """
    x = b.center.copy()
    prev = np.inf
    for _ in range(max_iter):
        xa = euclidean_project_ellipsoid(a, x)
        xb = euclidean_project_ellipsoid(b, xa)
        d = float(np.linalg.norm(xa - xb))
        if np.allclose(xa, xb, atol=1e-12):
            return 0.0
        if abs(prev - d) < tol:
            return d
        prev = d
        x = xb
    return prev
