"""Outer optimization loop over the switching intervals.

Each iteration re-linearizes the dynamics, takes a regularized Newton step on
the free intervals inside ``{sum(delta) = T, lb <= delta <= ub}``, and
backtracks along the projected arc.  ``ExternalProblem`` exposes the same
callbacks for third-party NLP solvers.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import precompute_eigen
from .problem import SwitchedProblem, equally_spaced, project_box_sum, project_to_delta, switching_times
from .simulate import integrate
from .sensitivity import CostEvaluation, PropagationOverflow, evaluate, frozen_cost

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILURE = "line_search_failure"
OVERFLOW = "overflow"
TERMINATIONS = (CONVERGED, MAX_ITER, LINE_SEARCH_FAILURE, OVERFLOW)


@dataclass
class SolverOptions:
    max_iter: int = 100
    tol: float = 1e-8
    hessian_regularization: float = 1e-6
    step_init: float = 1.0
    step_shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 40
    # a step may close at most this fraction of the gap to a lower bound
    boundary_fraction: float = 0.99
    # reject steps whose re-linearized cost rises (nonlinear problems); slower,
    # and may stop early since the frozen model and the re-linearized cost
    # have slightly different stationary points
    monotone: bool = False
    mode: str = "builtin"
    # "exact" or "identity"; identity turns the method into projected gradient descent
    hessian: str = "exact"
    verify: bool = True
    oracle_rtol: float = 1e-8
    oracle_atol: float = 1e-10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.mode not in ("builtin", "external"):
            raise ValueError(f"unknown solver mode {self.mode!r}")
        if self.hessian not in ("exact", "identity"):
            raise ValueError(f"unknown hessian option {self.hessian!r}")
        if not 0 < self.step_shrink < 1:
            raise ValueError("step_shrink must lie in (0, 1)")
        if not 0 < self.boundary_fraction <= 1:
            raise ValueError("boundary_fraction must lie in (0, 1]")


@dataclass
class SolveReport:
    delta_star: np.ndarray
    tau_star: np.ndarray
    J_final: float
    J_history: list = field(default_factory=list)
    J_oracle: float | None = None
    linearization_gap: float | None = None
    n_cost_evaluations: int = 0
    n_iterations: int = 0
    optimality: float = float("nan")
    wall_time: float = 0.0
    termination: str = CONVERGED

    @property
    def ok(self) -> bool:
        return self.termination in (CONVERGED, MAX_ITER)

    def to_dict(self) -> dict:
        return {
            "delta_star": [float(v) for v in self.delta_star],
            "tau_star": [float(v) for v in self.tau_star],
            "J_final": float(self.J_final),
            "J_oracle": None if self.J_oracle is None else float(self.J_oracle),
            "linearization_gap": None if self.linearization_gap is None else float(self.linearization_gap),
            "J_history": [float(v) for v in self.J_history],
            "n_cost_evaluations": int(self.n_cost_evaluations),
            "n_iterations": int(self.n_iterations),
            "optimality": float(self.optimality),
            "wall_time": float(self.wall_time),
            "termination": self.termination,
        }


def _active_masks(delta, p: SwitchedProblem, tol: float):
    at_lb = delta - p.lb <= tol
    at_ub = p.ub - delta <= tol
    return at_lb, at_ub


def _tangent_projection(v, at_lb, at_ub):
    """Project ``v`` onto ``{d : sum(d) = 0, d >= 0 on at_lb, d <= 0 on at_ub}``."""
    lo = np.where(at_lb, 0.0, -np.inf)
    hi = np.where(at_ub, 0.0, np.inf)
    return project_box_sum(v, lo, hi, 0.0)


def first_order_optimality(delta, grad, p: SwitchedProblem, active_tol: float | None = None) -> float:
    """Infinity norm of the steepest feasible descent direction at ``delta``."""
    delta = np.asarray(delta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if delta.size <= 1:
        return 0.0
    tol = 1e-10 * p.T if active_tol is None else active_tol
    at_lb, at_ub = _active_masks(delta, p, tol)
    d = _tangent_projection(-grad, at_lb, at_ub)
    return float(np.abs(d).max())


def _nullspace_of_ones(k: int) -> np.ndarray:
    """Orthonormal basis (k x (k-1)) of ``{d : sum(d) = 0}``."""
    Qm, _ = np.linalg.qr(np.hstack((np.ones((k, 1)), np.eye(k)[:, : k - 1])))
    return Qm[:, 1:]


def regularize(H: np.ndarray, floor: float) -> np.ndarray:
    """Symmetric eigenvalue floor: eigenvalues become ``max(|lam|, floor)``."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(np.abs(w), floor)
    return (V * w) @ V.T


def newton_direction(delta, ev: CostEvaluation, p: SwitchedProblem, opts: SolverOptions,
                     active_eps: float) -> np.ndarray:
    """Regularized Newton step on the intervals not held at a bound.

    Held intervals (within ``active_eps`` of a bound that steepest descent
    pushes against) are sent onto that bound; the free intervals take the
    Newton step of the quadratic model under the matching sum constraint.
    """
    g = ev.grad
    n = g.size
    at_lb, at_ub = _active_masks(delta, p, active_eps)
    d_sd = _tangent_projection(-g, at_lb, at_ub)
    # a bound stays held when steepest descent does not leave it
    held_lb = at_lb & (d_sd <= 0)
    held_ub = at_ub & (d_sd >= 0) & ~held_lb
    free = np.flatnonzero(~(held_lb | held_ub))
    d = np.zeros(n)
    d[held_lb] = p.lb[held_lb] - delta[held_lb]
    d[held_ub] = p.ub[held_ub] - delta[held_ub]
    if free.size == 0:
        return d
    # free part must carry the held intervals' shift in the total
    d_p = np.full(free.size, -d.sum() / free.size)
    if free.size == 1:
        d[free] = d_p
        return d
    Z = _nullspace_of_ones(free.size)
    H = np.eye(n) if opts.hessian == "identity" else ev.hess
    Hz = Z.T @ H[np.ix_(free, free)] @ Z
    if opts.hessian == "exact":
        floor = opts.hessian_regularization * max(1.0, np.linalg.norm(Hz, 2))
        Hz = regularize(Hz, floor)
    # model gradient at the point where the held intervals have moved
    d[free] = d_p
    gz = Z.T @ (g + H @ d)[free]
    d[free] = d_p - Z @ np.linalg.solve(Hz, gz)
    return d


class _Counter:
    """Counts cost evaluations, full and frozen-model alike."""

    def __init__(self, p, eigen):
        self.p = p
        self.eigen = eigen
        self.count = 0

    def __call__(self, delta) -> CostEvaluation:
        self.count += 1
        return evaluate(self.p, delta, eigen=self.eigen)

    def model(self, ev: CostEvaluation):
        """Merit function for the line search around ``ev``.

        Returns ``(J, evaluation or None)``.  Linear problems have no
        linearization to freeze, so the exact evaluation doubles as the model.
        """
        if self.p.is_linear:
            def merit(delta):
                ev_t = self(delta)
                return ev_t.J, ev_t
        else:
            def merit(delta):
                self.count += 1
                return frozen_cost(ev.cache, delta), None
        return merit

    def confirm(self, J_ref: float, monotone: bool):
        """Full evaluation of an accepted trial.

        With ``monotone`` the trial is rejected when its re-linearized cost
        exceeds ``J_ref``.
        """
        def check(delta, payload):
            ev_t = payload if payload is not None else self(delta)
            return ev_t if not monotone or ev_t.J <= J_ref else None
        return check


def _boundary_step(delta, direction, p, fraction, active_eps):
    """Largest step closing at most ``fraction`` of any shrinking interval's gap to its bound.

    Gaps already within ``active_eps`` are exempt so such intervals can land
    on the bound instead of creeping toward it.
    """
    room = delta - p.lb
    mask = (direction < 0) & (room > active_eps)
    if not mask.any():
        return np.inf
    return float(np.min(fraction * room[mask] / -direction[mask]))


def _line_search(merit, confirm, delta, ev, direction, p, opts, alpha0, active_eps=0.0):
    """Backtrack along ``project(delta + a * direction)`` with an Armijo test.

    ``merit`` scores trials; ``confirm`` turns an accepted trial into a full
    evaluation, or None when the re-linearized cost would rise, in which case
    backtracking continues.  Returns ``(delta_new, ev_new)`` or ``None``.  If
    no trial meets the Armijo test the best strictly decreasing one is taken.
    """
    alpha = min(alpha0, _boundary_step(delta, direction, p, opts.boundary_fraction, active_eps))
    best = None
    for _ in range(opts.max_backtracks):
        trial = project_to_delta(delta + alpha * direction, p)
        step = trial - delta
        if np.abs(step).max() <= 1e-15 * p.T:
            break
        try:
            J_t, payload = merit(trial)
            predicted = float(ev.grad @ step)
            if predicted < 0 and J_t <= ev.J + opts.sufficient_decrease * predicted:
                ev_t = confirm(trial, payload)
                if ev_t is not None:
                    return trial, ev_t
            elif J_t < ev.J and (best is None or J_t < best[1]):
                best = (trial, J_t, payload)
        except (PropagationOverflow, FloatingPointError):
            pass
        alpha *= opts.step_shrink
    if best is not None:
        try:
            ev_t = confirm(best[0], best[2])
        except (PropagationOverflow, FloatingPointError):
            ev_t = None
        if ev_t is not None:
            return best[0], ev_t
    return None


def solve(p: SwitchedProblem, delta0=None, opts: SolverOptions | None = None,
          backend: Callable | None = None) -> SolveReport:
    """Locally optimal switching intervals for ``p``.

    ``delta0`` defaults to equally spaced intervals.  In ``external`` mode the
    problem callbacks are handed to ``backend(problem, delta0, opts)``, which
    must return the final intervals.
    """
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    delta = equally_spaced(p) if delta0 is None else np.asarray(delta0, dtype=float)
    if delta.shape != (p.n_modes,):
        raise ValueError(f"delta0 must have {p.n_modes} entries")
    if (np.any(delta < p.lb - 1e-10 * p.T) or np.any(delta > p.ub + 1e-10 * p.T)
            or abs(delta.sum() - p.T) > 1e-9 * p.T):
        raise ValueError("delta0 is not feasible")
    delta = project_to_delta(delta, p)
    eigen = precompute_eigen(p.modes, p.Q) if p.is_linear else None
    fun = _Counter(p, eigen)

    if opts.mode == "external":
        if backend is None:
            raise ValueError("external mode needs a backend callable")
        ext = ExternalProblem(p, eigen=eigen)
        delta = project_to_delta(np.asarray(backend(ext, delta, opts), dtype=float), p)
        ev = ext.evaluation(delta)
        report = SolveReport(delta, switching_times(delta), ev.J, J_history=list(ext.history),
                             n_cost_evaluations=ext.n_evaluations,
                             optimality=first_order_optimality(delta, ev.grad, p),
                             termination=CONVERGED)
        return _finish(p, report, opts, t_start)

    try:
        ev = fun(delta)
    except PropagationOverflow:
        report = SolveReport(delta, switching_times(delta), float("inf"),
                             n_cost_evaluations=fun.count, termination=OVERFLOW)
        report.wall_time = time.perf_counter() - t_start
        return report

    history = [ev.J]
    termination = MAX_ITER
    n_iter = 0
    opt = first_order_optimality(delta, ev.grad, p)
    if p.n_modes == 1:
        termination = CONVERGED
    while termination == MAX_ITER and n_iter < opts.max_iter:
        if opt <= opts.tol:
            termination = CONVERGED
            break
        n_iter += 1
        width = np.abs(delta - project_to_delta(delta - ev.grad, p)).max()
        active_eps = min(1e-3 * p.T / p.n_modes, width)
        d = newton_direction(delta, ev, p, opts, active_eps)
        merit, confirm = fun.model(ev), fun.confirm(ev.J, opts.monotone)
        step = None
        if np.any(d):
            step = _line_search(merit, confirm, delta, ev, d, p, opts, opts.step_init, active_eps)
        if step is None:
            d_sd = _tangent_projection(-ev.grad, *_active_masks(delta, p, 1e-10 * p.T))
            scale = opts.step_init / max(1.0, np.abs(d_sd).max() / (p.T / p.n_modes))
            step = _line_search(merit, confirm, delta, ev, -ev.grad, p, opts, scale, active_eps)
        if step is None:
            termination = LINE_SEARCH_FAILURE
            break
        delta, ev = step
        history.append(ev.J)
        opt = first_order_optimality(delta, ev.grad, p)
        logger.debug("iter %d  J=%.10g  opt=%.3e", n_iter, ev.J, opt)
    else:
        if opt <= opts.tol:
            termination = CONVERGED

    report = SolveReport(delta, switching_times(delta), ev.J, J_history=history,
                         n_cost_evaluations=fun.count, n_iterations=n_iter,
                         optimality=opt, termination=termination)
    return _finish(p, report, opts, t_start)


def _finish(p, report: SolveReport, opts: SolverOptions, t_start: float) -> SolveReport:
    report.wall_time = time.perf_counter() - t_start
    if opts.verify and np.isfinite(report.J_final):
        report.J_oracle = integrate(p, report.delta_star, rtol=opts.oracle_rtol,
                                    atol=opts.oracle_atol).J_oracle
        if report.J_oracle != 0:
            report.linearization_gap = abs(report.J_oracle - report.J_final) / abs(report.J_oracle)
        else:
            report.linearization_gap = abs(report.J_final)
    return report


class ExternalProblem:
    """Callback contract for driving the optimization from another NLP solver.

    ``cost``, ``gradient`` and ``hessian`` are pure functions of ``delta``;
    the three share one evaluation per distinct ``delta``.  Constraints are
    ``A_eq @ delta = b_eq`` with ``A_eq`` a row of ones, plus ``lb``/``ub``.
    """

    def __init__(self, p: SwitchedProblem, eigen=None):
        self.p = p
        self._eigen = eigen if eigen is not None or not p.is_linear else precompute_eigen(p.modes, p.Q)
        self._key = None
        self._ev = None
        self.n_evaluations = 0
        self.history: list[float] = []

    @property
    def n(self) -> int:
        return self.p.n_modes

    @property
    def A_eq(self) -> np.ndarray:
        return np.ones((1, self.n))

    @property
    def b_eq(self) -> np.ndarray:
        return np.array([self.p.T])

    @property
    def lb(self) -> np.ndarray:
        return self.p.lb.copy()

    @property
    def ub(self) -> np.ndarray:
        return self.p.ub.copy()

    def evaluation(self, delta) -> CostEvaluation:
        delta = np.asarray(delta, dtype=float)
        key = delta.tobytes()
        if key != self._key:
            # backends may probe slightly outside the box or off the horizon
            safe = np.maximum(delta, 0.0)
            p = self.p
            if abs(safe.sum() - p.T) > 1e-9 * p.T:
                from dataclasses import replace

                p = replace(p, T=float(safe.sum()), lb=None, ub=None)
            self._ev = evaluate(p, safe, eigen=self._eigen)
            self._key = key
            self.n_evaluations += 1
            self.history.append(self._ev.J)
        return self._ev

    def cost(self, delta) -> float:
        return self.evaluation(delta).J

    def gradient(self, delta) -> np.ndarray:
        return self.evaluation(delta).grad.copy()

    def hessian(self, delta) -> np.ndarray:
        return self.evaluation(delta).hess.copy()

    def hessian_lower(self, delta):
        """Lower-triangle ``(rows, cols, values)`` as sparse-triplet NLP interfaces expect."""
        H = self.evaluation(delta).hess
        rows, cols = np.tril_indices(self.n)
        return rows, cols, H[rows, cols]


def scipy_backend(problem: ExternalProblem, delta0, opts: SolverOptions) -> np.ndarray:
    """Adapter driving ``scipy.optimize.minimize(method="trust-constr")``."""
    from scipy.optimize import Bounds, LinearConstraint, minimize

    res = minimize(problem.cost, delta0, jac=problem.gradient, hess=problem.hessian,
                   method="trust-constr",
                   constraints=[LinearConstraint(problem.A_eq, problem.b_eq, problem.b_eq)],
                   bounds=Bounds(problem.lb, problem.ub),
                   options={"maxiter": max(opts.max_iter, 200), "gtol": opts.tol, "xtol": 1e-14})
    return res.x
