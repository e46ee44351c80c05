"""Per-agent DMPC: build the embedded QP from state, predictions, and obstacles.

Variable layout of every instance is [w | zeta | eps | delta]:
control points, obstacle slacks (one per probed obstacle), inter-agent safety
slacks (neighbor-major, then horizon step), cohesion slacks (same order).

Constraint linearization: safety and cohesion rows are first-order expansions
of the scaled distance around the agent's own time-shifted previous plan vs.
the neighbor's predicted trajectory. Obstacle rows linearize the scaled
center distance ||E(p - C)|| - 1, whose gradient points outward even when the
linearization point has penetrated the surface.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import (
    BezierBasis,
    BezierPlan,
    Ellipsoid,
    bernstein_row,
    build_basis,
    closest_point_on_ellipsoid,
    eval_bezier,
    derivative_plan,
    point_surface_distance,
    surface_distance,
)
from .qpcore import QpInstance, QpSolution, SolveStatus, solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostWeights:
    q_mig: float = 1.0
    l_saf: float = 1e4
    q_saf: float = 1e2
    l_coh: float = 1e3
    q_coh: float = 10.0
    q_eft: float = 70.0

    def __post_init__(self):
        if min(self.q_mig, self.l_saf, self.q_saf, self.l_coh, self.q_coh, self.q_eft) < 0:
            raise ValueError("cost weights must be nonnegative")


@dataclass(frozen=True)
class MotionLimits:
    v_min: float = -1.5
    v_max: float = 1.5
    a_min: float = -1.0
    a_max: float = 1.0


@dataclass(frozen=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        v = np.asarray(self.velocity, dtype=float).reshape(3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ValueError("agent state must be finite")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)


@dataclass(frozen=True)
class CollisionProbe:
    k_coll: int
    obstacle: int
    depth: float


@dataclass
class ControllerConfig:
    horizon: int = 16
    dt: float = 0.2
    segments: int = 3
    degree: int = 5
    weights: CostWeights = field(default_factory=CostWeights)
    limits: MotionLimits = field(default_factory=MotionLimits)
    r_min: float = 0.15
    r_coh: float = 2.5
    agent_shape: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.agent_shape = np.asarray(self.agent_shape, dtype=float).reshape(3, 3)


@dataclass
class PlanResult:
    plan: BezierPlan
    trajectory: np.ndarray          # F w*, length 3P
    slack_obstacle: np.ndarray
    slack_safety: np.ndarray
    slack_cohesion: np.ndarray
    duals: np.ndarray
    costs: dict
    status: SolveStatus
    fallback: bool = False
    active_set: np.ndarray | None = None
    active_labels: frozenset | None = None  # structure-independent warm hint

    @property
    def total_cost(self):
        return sum(self.costs.values())


class PlanningError(RuntimeError):
    pass


class BasisBundle:
    """Precomputed linear maps for one (l, d, P, dt) family."""

    def __init__(self, cfg: ControllerConfig):
        l, d, horizon, dt = cfg.segments, cfg.degree, cfg.horizon, cfg.dt
        self.cfg = cfg
        self.basis: BezierBasis = build_basis(l, d, horizon, dt)
        self.seg_dur = self.basis.segment_duration
        n_w = 3 * l * (d + 1)
        self.n_w = n_w

        def diff_map(count_in, order_degree):
            """Control-point difference map of one derivative level."""
            rows = 3 * l * (count_in - 1)
            mat = np.zeros((rows, 3 * l * count_in))
            for s in range(l):
                for i in range(count_in - 1):
                    for ax in range(3):
                        r = 3 * (s * (count_in - 1) + i) + ax
                        mat[r, 3 * (s * count_in + i) + ax] = -order_degree / self.seg_dur
                        mat[r, 3 * (s * count_in + i + 1) + ax] = order_degree / self.seg_dur
            return mat

        self.d1 = diff_map(d + 1, d)                     # velocity control points
        self.d2 = diff_map(d, d - 1) @ self.d1           # acceleration control points

        # acceleration samples at the P times (for the effort cost)
        self.a2 = np.zeros((3 * horizon, n_w))
        for k, t in enumerate(self.basis.sample_times):
            seg = min(int(np.floor(t / self.seg_dur)), l - 1)
            tau = t / self.seg_dur - seg
            tau = min(max(tau, 0.0), 1.0)
            weights = bernstein_row(d - 2, tau)
            for i, wgt in enumerate(weights):
                rows = [3 * (seg * (d - 1) + i) + ax for ax in range(3)]
                for ax in range(3):
                    self.a2[3 * k + ax] += wgt * self.d2[rows[ax]]

        # junction continuity rows (positions, velocities, accelerations)
        cont = []
        for s in range(l - 1):
            for ax in range(3):
                row = np.zeros(n_w)
                row[3 * (s * (d + 1) + d) + ax] = 1.0
                row[3 * ((s + 1) * (d + 1)) + ax] = -1.0
                cont.append(row)
            for mat, count in ((self.d1, d + 1 - 1), (self.d2, d - 1)):
                for ax in range(3):
                    row = (mat[3 * (s * count + count - 1) + ax]
                           - mat[3 * ((s + 1) * count) + ax])
                    cont.append(row)
        self.continuity = np.array(cont) if cont else np.zeros((0, n_w))

        # initial-condition selector rows: position, velocity, acceleration at t=0
        init = []
        for ax in range(3):
            row = np.zeros(n_w)
            row[ax] = 1.0
            init.append(row)
        for mat, count in ((self.d1, d), (self.d2, d - 1)):
            for ax in range(3):
                init.append(mat[ax].copy())
        self.initial = np.array(init)

        # velocity/acceleration bound rows skip control points pinned by the
        # initial condition or a junction equality (first point of each segment)
        def bound_rows(mat, count):
            rows = []
            for s in range(l):
                for i in range(1, count):
                    for ax in range(3):
                        rows.append(mat[3 * (s * count + i) + ax])
            return np.array(rows)

        self.vel_rows = bound_rows(self.d1, d)
        self.acc_rows = bound_rows(self.d2, d - 1)

        # fallback fitter: min ||F w - u||^2 + reg ||w||^2  s.t.  continuity = 0
        f = self.basis.matrix
        n_c = self.continuity.shape[0]
        kkt = np.zeros((n_w + n_c, n_w + n_c))
        kkt[:n_w, :n_w] = 2 * (f.T @ f) + 1e-9 * np.eye(n_w)
        kkt[:n_w, n_w:] = self.continuity.T
        kkt[n_w:, :n_w] = self.continuity
        self._fit_lu = scipy.linalg.lu_factor(kkt)
        self._fit_rhs_map = 2 * f.T

    def fit_plan(self, trajectory) -> BezierPlan:
        """C0/C1/C2-continuous least-squares plan through a sampled trajectory."""
        rhs = np.concatenate([self._fit_rhs_map @ np.asarray(trajectory, float),
                              np.zeros(self.continuity.shape[0])])
        w = scipy.linalg.lu_solve(self._fit_lu, rhs)[:self.n_w]
        return BezierPlan.from_flat(w, self.cfg.segments, self.cfg.degree, self.seg_dur)


def hold_position_plan(position, cfg: ControllerConfig) -> BezierPlan:
    cp = np.tile(np.asarray(position, dtype=float), (cfg.segments, cfg.degree + 1, 1))
    return BezierPlan(cp, cfg.horizon * cfg.dt / cfg.segments)


def hold_position_trajectory(position, horizon) -> np.ndarray:
    return np.tile(np.asarray(position, dtype=float), horizon)


def shift_trajectory(trajectory, horizon) -> np.ndarray:
    """Advance a sampled trajectory one step, holding the terminal point."""
    pts = np.asarray(trajectory, dtype=float).reshape(horizon, 3)
    return np.vstack([pts[1:], pts[-1:]]).reshape(-1)


def detect_first_collision(prev_traj, obstacles, r_min, horizon=None,
                           norm_matrix=None) -> list[CollisionProbe]:
    """Earliest step per obstacle at which the trajectory breaches r_min.

    Distance is from each trajectory point to the obstacle's closest surface
    point, in the agent norm (Euclidean by default), negative inside.
    """
    traj = np.asarray(prev_traj, dtype=float)
    horizon = horizon or traj.size // 3
    pts = traj.reshape(horizon, 3)
    probes = []
    for m, obs in enumerate(obstacles):
        for k in range(horizon):
            sd = point_surface_distance(obs, pts[k], norm_matrix)
            if sd < r_min:
                probes.append(CollisionProbe(k, m, r_min - sd))
                break
    return probes


def _scaled_norm_gradient(u, shape_matrix):
    """Gradient of ||E u|| wrt u, with a deterministic +x fallback at u = 0.

    Returns (eta, scaled norm of the original u, degenerate flag).
    """
    m = shape_matrix.T @ shape_matrix
    s = np.sqrt(float(u @ m @ u))
    if s < 1e-9:
        ux = np.array([1.0, 0.0, 0.0])
        sx = np.sqrt(float(ux @ m @ ux))
        return (m @ ux) / sx, s, True
    return (m @ u) / s, s, False


def _obstacle_gradient(obs: Ellipsoid, p_hat, agent_shape):
    """Linearize the agent-norm distance to the obstacle's closest point.

    Returns (eta, signed distance at p_hat). The gradient always points away
    from the obstacle, also when the linearization point has penetrated.
    """
    c_hat = closest_point_on_ellipsoid(obs, p_hat)
    offset = np.asarray(p_hat, float) - c_hat
    m_a = agent_shape.T @ agent_shape
    g = np.sqrt(float(offset @ m_a @ offset))
    if g < 1e-9:
        # exactly on the surface: use the obstacle's outward normal direction
        w = obs.shape_matrix.T @ obs.shape_matrix @ (c_hat - obs.center)
        w /= np.linalg.norm(w)
        scale = np.sqrt(float(w @ m_a @ w))
        return (m_a @ w) / scale, 0.0
    eta = (m_a @ offset) / g
    if surface_distance(obs, p_hat) < 0:
        return -eta, -g
    return eta, g


@dataclass
class LinearizedRow:
    """Bookkeeping for one safety/cohesion row, enough to backprop into p-tilde."""

    row: int
    kind: str            # "safety" | "cohesion"
    neighbor: object
    step: int
    u: np.ndarray        # linearization offset p_hat - p_tilde
    eta: np.ndarray
    shape_matrix: np.ndarray
    p_tilde: np.ndarray
    degenerate: bool = False  # eta came from the +x fallback, not from u


def build_qp(state: AgentState, prev_plan: BezierPlan, neighbor_predictions: dict,
             obstacles, p_mig, cfg: ControllerConfig, bundle: BasisBundle,
             neighbors=None):
    """Assemble the agent's QP. Returns (QpInstance, per-row linearization metadata).

    neighbor_predictions maps neighbor id -> predicted trajectory (3P). If
    `neighbors` is given, every listed id must have a prediction.
    """
    horizon, n_w = cfg.horizon, bundle.n_w
    w = cfg.weights
    if neighbors is not None:
        missing = [j for j in neighbors if j not in neighbor_predictions]
        if missing:
            raise PlanningError(f"missing neighbor predictions for {missing}")
        ordered = sorted(neighbors)
    else:
        ordered = sorted(neighbor_predictions)
    n_nb = len(ordered)

    prev_traj = np.concatenate([eval_bezier(prev_plan, min(t + cfg.dt, prev_plan.total_duration))
                                for t in bundle.basis.sample_times])
    probes = detect_first_collision(prev_traj, obstacles, cfg.r_min, horizon,
                                    norm_matrix=cfg.agent_shape)

    n_z, n_eps, n_delta = len(probes), n_nb * horizon, n_nb * horizon
    n = n_w + n_z + n_eps + n_delta
    layout = {
        "w": slice(0, n_w),
        "zeta": slice(n_w, n_w + n_z),
        "eps": slice(n_w + n_z, n_w + n_z + n_eps),
        "delta": slice(n_w + n_z + n_eps, n),
    }

    f = bundle.basis.matrix
    p_mig = np.asarray(p_mig, dtype=float).reshape(3)
    p_bar = np.tile(p_mig, horizon)

    qmat = np.zeros((n, n))
    qvec = np.zeros(n)
    qmat[:n_w, :n_w] = 2 * w.q_mig * (f.T @ f) + 2 * w.q_eft * (bundle.a2.T @ bundle.a2)
    qvec[:n_w] = -2 * w.q_mig * (f.T @ p_bar)
    const = w.q_mig * horizon * float(p_mig @ p_mig)
    zs, es, ds = layout["zeta"], layout["eps"], layout["delta"]
    qmat[zs, zs] += np.eye(n_z) * 2 * w.q_saf
    qvec[zs] = w.l_saf
    qmat[es, es] += np.eye(n_eps) * 2 * w.q_saf
    qvec[es] = w.l_saf
    qmat[ds, ds] += np.eye(n_delta) * 2 * w.q_coh
    qvec[ds] = w.l_coh

    g_rows, h_vals, meta, labels = [], [], [], []

    def add_row(row, rhs, label):
        g_rows.append(row)
        h_vals.append(rhs)
        labels.append(label)
        return len(g_rows) - 1

    lim = cfg.limits
    for name, rows_mat, hi, lo in (("vel", bundle.vel_rows, lim.v_max, lim.v_min),
                                   ("acc", bundle.acc_rows, lim.a_max, lim.a_min)):
        for k, r in enumerate(rows_mat):
            full = np.zeros(n)
            full[:n_w] = r
            add_row(full, hi, (name, k, "hi"))
            full_neg = np.zeros(n)
            full_neg[:n_w] = -r
            add_row(full_neg, -lo, (name, k, "lo"))

    prev_pts = prev_traj.reshape(horizon, 3)
    for j_idx, j in enumerate(ordered):
        pred = np.asarray(neighbor_predictions[j], dtype=float).reshape(horizon, 3)
        for tau in range(horizon):
            u = prev_pts[tau] - pred[tau]
            eta, _, degen = _scaled_norm_gradient(u, cfg.agent_shape)
            f_tau = f[3 * tau:3 * tau + 3, :]
            # safety:  eta'(p - p_tilde) >= r_min - eps
            row = np.zeros(n)
            row[:n_w] = -(f_tau.T @ eta)
            row[es.start + j_idx * horizon + tau] = -1.0
            r_idx = add_row(row, -cfg.r_min - float(eta @ pred[tau]), ("saf", j, tau))
            meta.append(LinearizedRow(r_idx, "safety", j, tau, u, eta,
                                      cfg.agent_shape, pred[tau], degen))
            # cohesion:  eta'(p - p_tilde) <= r_coh + delta
            row = np.zeros(n)
            row[:n_w] = f_tau.T @ eta
            row[ds.start + j_idx * horizon + tau] = -1.0
            r_idx = add_row(row, cfg.r_coh + float(eta @ pred[tau]), ("coh", j, tau))
            meta.append(LinearizedRow(r_idx, "cohesion", j, tau, u, eta,
                                      cfg.agent_shape, pred[tau], degen))

    for z_idx, probe in enumerate(probes):
        obs: Ellipsoid = obstacles[probe.obstacle]
        p_hat = prev_pts[probe.k_coll]
        eta, signed_g = _obstacle_gradient(obs, p_hat, cfg.agent_shape)
        f_tau = f[3 * probe.k_coll:3 * probe.k_coll + 3, :]
        row = np.zeros(n)
        row[:n_w] = -(f_tau.T @ eta)
        row[zs.start + z_idx] = -1.0
        add_row(row, signed_g - float(eta @ p_hat) - cfg.r_min,
                ("obs", probe.obstacle))

    def slack_label(name, k):
        if name == "nnz":
            return (name, probes[k].obstacle)
        return (name, ordered[k // horizon], k % horizon)

    for slack_slice, name in ((zs, "nnz"), (es, "nne"), (ds, "nnd")):
        for k, i in enumerate(range(slack_slice.start, slack_slice.stop)):
            row = np.zeros(n)
            row[i] = -1.0
            add_row(row, 0.0, slack_label(name, k))

    g = np.array(g_rows) if g_rows else np.zeros((0, n))
    h = np.array(h_vals)

    # equalities: junction continuity plus pinned initial conditions. Position
    # anchors to the measurement (feedback); velocity and acceleration carry
    # over from the previous plan's reference state at +dt, otherwise the
    # receding horizon restarts from the servo-lagged plant velocity every
    # tick and the swarm stalls.
    t_handover = min(cfg.dt, prev_plan.total_duration)
    v0 = np.clip(eval_bezier(derivative_plan(prev_plan, 1), t_handover),
                 lim.v_min, lim.v_max)
    a0 = np.clip(eval_bezier(derivative_plan(prev_plan, 2), t_handover),
                 lim.a_min, lim.a_max)
    # the two pins determine the second velocity control point
    # q01 = v0 + a0 * seg_dur / (d-1); keep it inside the velocity box or the
    # QP is infeasible when the previous plan rides a bound
    pin_scale = (cfg.degree - 1) / bundle.seg_dur
    a0 = np.minimum(a0, (lim.v_max - v0) * pin_scale)
    a0 = np.maximum(a0, (lim.v_min - v0) * pin_scale)
    r_blocks = [bundle.continuity, bundle.initial]
    r = np.zeros((sum(bk.shape[0] for bk in r_blocks), n))
    r[:, :n_w] = np.vstack(r_blocks)
    b = np.concatenate([np.zeros(bundle.continuity.shape[0]),
                        state.position, v0, a0])

    qp = QpInstance(qmat, qvec, g, h, r, b, layout=layout, objective_constant=const)
    return qp, {"rows": meta, "probes": probes, "neighbors": ordered,
                "prev_traj": prev_traj, "labels": labels}


def cost_decomposition(trajectory, slack_obstacle, slack_safety, slack_cohesion,
                       p_mig, cfg: ControllerConfig, bundle: BasisBundle, w_vec=None):
    """Evaluate the five objective terms from a trajectory and slack values."""
    wts = cfg.weights
    pts = np.asarray(trajectory, float).reshape(cfg.horizon, 3)
    p_mig = np.asarray(p_mig, float).reshape(3)
    migration = wts.q_mig * float(np.sum((pts - p_mig) ** 2))
    if w_vec is None:
        w_vec = bundle.fit_plan(trajectory).flatten()
    acc = bundle.a2 @ np.asarray(w_vec, float)
    effort = wts.q_eft * float(acc @ acc)
    zeta = np.asarray(slack_obstacle, float)
    eps = np.asarray(slack_safety, float)
    delta = np.asarray(slack_cohesion, float)
    return {
        "migration": migration,
        "safe_agent": float(wts.l_saf * eps.sum() + wts.q_saf * (eps**2).sum()),
        "safe_obstacle": float(wts.l_saf * zeta.sum() + wts.q_saf * (zeta**2).sum()),
        "cohesion": float(wts.l_coh * delta.sum() + wts.q_coh * (delta**2).sum()),
        "control_effort": effort,
    }


def plan(state: AgentState, prev_plan: BezierPlan, neighbor_predictions: dict,
         obstacles, p_mig, cfg: ControllerConfig, bundle: BasisBundle,
         neighbors=None, warm_start=None, active_set_hint=None,
         hint_labels=None) -> PlanResult:
    """Solve the agent's QP; fall back to the time-shifted previous plan on failure.

    hint_labels is the previous tick's PlanResult.active_labels: row labels
    survive changes in neighbor sets and probes, so the hint stays usable
    while the raw mask would go stale.
    """
    qp, meta = build_qp(state, prev_plan, neighbor_predictions, obstacles,
                        p_mig, cfg, bundle, neighbors=neighbors)
    hint = active_set_hint if (active_set_hint is not None
                               and len(active_set_hint) == qp.num_ineq) else None
    if hint is None and hint_labels:
        hint = np.array([lab in hint_labels for lab in meta["labels"]])
    x0 = None
    if warm_start is not None:
        x0 = np.zeros(qp.num_vars)
        x0[:bundle.n_w] = warm_start
    sol = solve(qp, warm_start=x0, active_set_hint=hint)

    if sol.status != SolveStatus.OPTIMAL:
        log.warning("DMPC solve returned %s; falling back to shifted previous plan",
                    sol.status.value)
        shifted = shift_trajectory(meta["prev_traj"], cfg.horizon)
        fb_plan = bundle.fit_plan(shifted)
        traj = bundle.basis.matrix @ fb_plan.flatten()
        costs = cost_decomposition(traj, [], [], [], p_mig, cfg, bundle,
                                   w_vec=fb_plan.flatten())
        return PlanResult(fb_plan, traj, np.zeros(0), np.zeros(0), np.zeros(0),
                          np.zeros(qp.num_ineq), costs, sol.status, fallback=True)

    w_vec = sol.x[qp.layout["w"]]
    traj = bundle.basis.matrix @ w_vec
    zeta = sol.x[qp.layout["zeta"]]
    eps = sol.x[qp.layout["eps"]]
    delta = sol.x[qp.layout["delta"]]
    costs = cost_decomposition(traj, zeta, eps, delta, p_mig, cfg, bundle, w_vec=w_vec)
    bez = BezierPlan.from_flat(w_vec, cfg.segments, cfg.degree, bundle.seg_dur)
    active = (sol.ineq_duals > 1e-6) | (sol.slack(qp) < 1e-6)
    active_labels = frozenset(lab for lab, a in zip(meta["labels"], active) if a)
    return PlanResult(bez, traj, zeta, eps, delta, sol.ineq_duals, costs,
                      sol.status, active_set=active, active_labels=active_labels)


def prediction_row_gradients(meta, d_g, d_h, cfg: ControllerConfig, bundle: BasisBundle):
    """Map KKT-layer gradients on (G, h) back to neighbor-prediction gradients.

    Only the linearized safety/cohesion rows depend on the predictions: both
    their w-block (through eta) and their right-hand side (through eta and the
    predicted point itself). Returns {neighbor id: gradient array of len 3P}.
    """
    horizon, n_w = cfg.horizon, bundle.n_w
    f = bundle.basis.matrix
    grads = {j: np.zeros(3 * horizon) for j in meta["neighbors"]}
    for rec in meta["rows"]:
        c = -1.0 if rec.kind == "safety" else 1.0
        row_w = d_g[rec.row, :n_w]
        dh_r = d_h[rec.row]
        if not np.any(row_w) and dh_r == 0.0:
            continue
        f_tau = f[3 * rec.step:3 * rec.step + 3, :]
        d_eta = c * (f_tau @ row_w) + c * dh_r * rec.p_tilde
        d_ptilde = c * dh_r * rec.eta
        if not rec.degenerate:
            m = rec.shape_matrix.T @ rec.shape_matrix
            mu = m @ rec.u
            s = np.sqrt(float(rec.u @ mu))
            jac = m / s - np.outer(mu, mu) / s**3
            d_ptilde = d_ptilde - jac @ d_eta  # du/dp_tilde = -I
        grads[rec.neighbor][3 * rec.step:3 * rec.step + 3] += d_ptilde
    return grads
