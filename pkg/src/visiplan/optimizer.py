"""Quasi-Newton minimization of the total cost over free control points.

Decision variables are the free position control points (index 3 onward,
three scalars each) followed by the free yaw control points, yaw scaled to
meters so the two blocks are comparably conditioned. The first three
position and yaw control points encode the robot's current state and are
never touched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from .costs import (CostReport, CostWeights, DynamicLimits, TargetTrack,
                    VisibilityParams, total_cost)
from .env import ESDFField
from .spline import TrajectoryBSpline

_ARMIJO_C1 = 1e-4
_BACKTRACK = 0.5


class Termination(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    BUDGET_EXHAUSTED = "budget_exhausted"
    LINE_SEARCH_FAILURE = "line_search_failure"


class NumericError(RuntimeError):
    """Non-finite value or gradient in a cost term."""


@dataclass
class OptimizerConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-5
    relative_cost_tolerance: float = 1e-8
    history_size: int = 8
    max_line_search_steps: int = 40
    wall_clock_budget: float = 0.05     # seconds; None disables the budget

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tolerance",
                     "relative_cost_tolerance", "history_size",
                     "max_line_search_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.wall_clock_budget is not None and self.wall_clock_budget <= 0:
            raise ValueError("wall_clock_budget must be positive or None")


@dataclass
class OptimizeResult:
    trajectory: TrajectoryBSpline
    final_report: CostReport
    iterations: int
    termination: Termination
    trace: list = field(default_factory=list, repr=False)


def _find_nonfinite_term(traj, target, esdf, params, weights, limits) -> str:
    from . import costs as c
    probes = [
        ("cost_do", weights.w_do, lambda: c.cost_do(traj, target, params)),
        ("cost_ao", weights.w_ao, lambda: c.cost_ao(traj, target, params)),
        ("cost_oe", weights.w_oe, lambda: c.cost_oe(traj, target, params, esdf)),
        ("cost_feasibility", weights.w_f, lambda: c.cost_feasibility(traj, limits)),
        ("cost_yaw_feasibility", weights.w_f_phi,
         lambda: c.cost_yaw_feasibility(traj, limits)),
        ("cost_smoothness", weights.w_s, lambda: c.cost_smoothness(traj)),
        ("cost_yaw_smoothness", weights.w_s_phi, lambda: c.cost_yaw_smoothness(traj)),
        ("cost_collision", weights.w_c, lambda: c.cost_collision(traj, limits, esdf)),
        ("cost_safe_tracking", weights.w_v,
         lambda: c.cost_safe_tracking(traj, params, limits)),
    ]
    for name, w, fn in probes:
        if w == 0.0:
            continue
        v, gq, gp = fn()
        if not (np.isfinite(v) and np.isfinite(gq).all() and np.isfinite(gp).all()):
            return name
    return "unknown term"


def optimize(initial: TrajectoryBSpline, target: TargetTrack, esdf: ESDFField,
             params: VisibilityParams, weights: CostWeights,
             limits: DynamicLimits,
             config: OptimizerConfig | None = None,
             keep_trace: bool = False) -> OptimizeResult:
    """Minimize the weighted total cost; returns the best trajectory found.

    Guarantees: the accepted cost sequence is non-increasing, the first three
    position/yaw control points are returned bit-identical, and the result is
    deterministic for identical inputs.
    """
    cfg = config or OptimizerConfig()
    start = time.perf_counter()
    traj = initial.copy()
    n = traj.num_control_points
    nf = n - 3                       # free control points per block
    dt = traj.dt

    # Whiten the stiff fixed quadratics: jerk smoothness carries curvature
    # ~w/dt^6 and the derivative bounds ~w/dt^2, dwarfing the O(1)
    # visibility terms and stalling the limited-memory updates. Decision
    # variables are the control points mapped through the Cholesky factor of
    # alpha*I + smoothness Hessian + a velocity-bound curvature estimate.
    # Yaw keeps at least the od_max meters-per-radian conversion via alpha.
    d3 = _difference_operator(n, 3)[:, 3:] / dt ** 3
    d1 = _difference_operator(n, 1)[:, 3:] / dt
    smooth_h = d3.T @ d3
    feas_h = d1.T @ d1
    h_q = np.eye(nf) + 2.0 * weights.w_s * smooth_h + 4.0 * weights.w_f * feas_h
    h_phi = params.od_max ** 2 * np.eye(nf) \
        + 2.0 * weights.w_s_phi * smooth_h + 4.0 * weights.w_f_phi * feas_h
    r_q = np.linalg.cholesky(h_q).T         # upper, r.T @ r = h
    r_phi = np.linalg.cholesky(h_phi).T

    def pack(t: TrajectoryBSpline) -> np.ndarray:
        return np.concatenate([(r_q @ t.q[3:]).ravel(), r_phi @ t.phi[3:]])

    def unpack_into(x: np.ndarray, t: TrajectoryBSpline):
        t.q[3:] = solve_triangular(r_q, x[:3 * nf].reshape(nf, 3))
        t.phi[3:] = solve_triangular(r_phi, x[3 * nf:])

    def eval_at(x: np.ndarray):
        unpack_into(x, traj)
        rep = total_cost(traj, target, esdf, params, weights, limits)
        g = np.concatenate([
            solve_triangular(r_q.T, rep.grad_q[3:], lower=True).ravel(),
            solve_triangular(r_phi.T, rep.grad_phi[3:], lower=True)])
        return rep, g

    x = pack(traj)
    report, grad = eval_at(x)
    if not (np.isfinite(report.total) and np.isfinite(grad).all()):
        raise NumericError("non-finite initial cost in "
                           + _find_nonfinite_term(traj, target, esdf, params,
                                                  weights, limits))

    trace = []
    if keep_trace:
        trace.append((0, report.term_values()))

    best_x, best_report = x.copy(), report
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    termination = Termination.MAX_ITER
    iteration = 0

    while iteration < cfg.max_iterations:
        if np.max(np.abs(grad)) <= cfg.gradient_tolerance:
            termination = Termination.CONVERGED
            break
        if cfg.wall_clock_budget is not None and \
                time.perf_counter() - start > cfg.wall_clock_budget:
            termination = Termination.BUDGET_EXHAUSTED
            break

        d = _lbfgs_direction(grad, s_hist, y_hist)
        if d @ grad >= 0.0:      # not a descent direction; reset memory
            s_hist.clear()
            y_hist.clear()
            d = -grad

        # without curvature information a unit step along -grad can be
        # arbitrarily large; start at a unit-length move instead
        step = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(d), 1.0))
        f0, g_dot_d = report.total, grad @ d
        accepted = None
        for _ in range(cfg.max_line_search_steps):
            x_new = x + step * d
            rep_new, grad_new = eval_at(x_new)
            if not (np.isfinite(rep_new.total) and np.isfinite(grad_new).all()):
                unpack_into(x_new, traj)
                raise NumericError(
                    "non-finite cost or gradient in "
                    + _find_nonfinite_term(traj, target, esdf, params,
                                           weights, limits))
            if rep_new.total <= f0 + _ARMIJO_C1 * step * g_dot_d:
                accepted = (x_new, rep_new, grad_new)
                break
            step *= _BACKTRACK
        if accepted is None:
            termination = Termination.LINE_SEARCH_FAILURE
            break

        x_new, rep_new, grad_new = accepted
        s_hist.append(x_new - x)
        y_hist.append(grad_new - grad)
        if len(s_hist) > cfg.history_size:
            s_hist.pop(0)
            y_hist.pop(0)

        rel_drop = (report.total - rep_new.total) / max(abs(report.total), 1e-300)
        x, report, grad = x_new, rep_new, grad_new
        iteration += 1
        if keep_trace:
            trace.append((iteration, report.term_values()))
        if report.total < best_report.total:
            best_x, best_report = x.copy(), report
        if rel_drop <= cfg.relative_cost_tolerance:
            termination = Termination.CONVERGED
            break

    unpack_into(best_x, traj)
    # boundary block untouched by construction; restate exactly from input
    traj.q[:3] = initial.q[:3]
    traj.phi[:3] = initial.phi[:3]
    return OptimizeResult(traj, best_report, iteration, termination, trace)


def _difference_operator(n: int, order: int) -> np.ndarray:
    """(n - order, n) finite-difference stencil matrix (unscaled by dt)."""
    op = np.eye(n)
    for _ in range(order):
        op = op[1:] - op[:-1]
    return op


def _lbfgs_direction(grad: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """Two-loop recursion over the stored curvature pairs."""
    q = -grad.copy()
    if not s_hist:
        return q
    alphas = []
    rhos = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        sy = s @ y
        if sy <= 1e-12:
            rhos.append(0.0)
            alphas.append(0.0)
            continue
        rho = 1.0 / sy
        a = rho * (s @ q)
        q -= a * y
        rhos.append(rho)
        alphas.append(a)
    s, y = s_hist[-1], y_hist[-1]
    yy = y @ y
    sy = s @ y
    if sy > 1e-12 and yy > 1e-12:
        q *= sy / yy
    for (s, y), rho, a in zip(zip(s_hist, y_hist), reversed(rhos),
                              reversed(alphas)):
        if rho == 0.0:
            continue
        b = rho * (y @ q)
        q += (a - b) * s
    return q
