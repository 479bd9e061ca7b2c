import numpy as np
import pytest

import switchtime.nlpsolve as nlp
from switchtime.io import builtin_problem
from switchtime.nlpsolve import (
    CONVERGED,
    ExternalProblem,
    SolverOptions,
    first_order_optimality,
    regularize,
    scipy_backend,
    solve,
)
from switchtime.problem import LinearMode, SwitchedProblem, switching_times
from switchtime.sensitivity import evaluate

from conftest import random_delta, random_linear_problem

BENCH_TAU_LINEAR = np.array([0.100, 0.297, 0.433, 0.642, 0.767])
A1 = np.array([[-1.0, 0.0], [1.0, 2.0]])
A2 = np.array([[1.0, 1.0], [1.0, -2.0]])


def in_delta(delta, p, tol=1e-8):
    return (np.all(delta >= p.lb - tol) and np.all(delta <= p.ub + tol)
            and abs(delta.sum() - p.T) <= tol)


# ---------------------------------------------------------------- options


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(tol=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iter=0)
    with pytest.raises(ValueError):
        SolverOptions(mode="sqp")
    with pytest.raises(ValueError):
        SolverOptions(hessian="bfgs")
    with pytest.raises(ValueError):
        SolverOptions(step_shrink=1.0)
    with pytest.raises(ValueError):
        SolverOptions(boundary_fraction=0.0)
    opts = SolverOptions()
    assert (opts.step_init, opts.step_shrink, opts.sufficient_decrease) == (1.0, 0.5, 1e-4)
    assert opts.hessian_regularization == 1e-6


def test_infeasible_start_rejected():
    p = builtin_problem("unstable-linear")
    with pytest.raises(ValueError):
        solve(p, np.full(6, 0.2))
    with pytest.raises(ValueError):
        solve(p, [1.2, -0.2, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        solve(p, [0.5, 0.5])


def test_external_mode_needs_backend():
    with pytest.raises(ValueError):
        solve(builtin_problem("unstable-linear"), opts=SolverOptions(mode="external"))


# ---------------------------------------------------------------- optimality measure


def test_optimality_constant_gradient_is_zero():
    p = builtin_problem("unstable-linear")
    assert first_order_optimality(np.full(6, 1 / 6), np.full(6, 3.7), p) == pytest.approx(0, abs=1e-15)


def test_optimality_two_modes():
    p = SwitchedProblem([LinearMode(A1), LinearMode(A2)], [1, 1], np.eye(2), np.zeros((2, 2)), 1.0)
    assert first_order_optimality([0.5, 0.5], [1.0, -1.0], p) == pytest.approx(1.0)
    # at the bound the only feasible motion increases the collapsed interval, which
    # does not decrease J, so the measure vanishes
    assert first_order_optimality([0.0, 1.0], [1.0, -1.0], p) == 0.0


def test_regularize_floors_and_flips():
    H = np.diag([-2.0, 1e-12, 3.0])
    R = regularize(H, 1e-6)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(R)), [1e-6, 2.0, 3.0])


# ---------------------------------------------------------------- solve


def test_single_mode_returns_immediately():
    p = SwitchedProblem([LinearMode(A1)], [1, 1], np.eye(2), np.zeros((2, 2)), 1.0)
    rep = solve(p)
    assert rep.termination == CONVERGED
    assert rep.n_iterations == 0
    np.testing.assert_array_equal(rep.delta_star, [1.0])
    assert rep.J_final == evaluate(p, [1.0]).J


def test_unstable_linear_reproduces_optimum():
    rep = solve(builtin_problem("unstable-linear"), opts=SolverOptions(tol=1e-8))
    assert rep.termination == CONVERGED
    assert np.abs(rep.tau_star[1:-1] - BENCH_TAU_LINEAR).max() <= 5e-3
    assert rep.optimality <= 1e-6
    assert rep.linearization_gap <= 1e-6
    # n_cost_evaluations counts every evaluation, the initial one included
    assert rep.n_cost_evaluations >= rep.n_iterations + 1


def test_unstable_linear_frozen_result():
    rep = solve(builtin_problem("unstable-linear"))
    np.testing.assert_allclose(rep.tau_star[1:-1], [0.1002, 0.2974, 0.4329, 0.6418, 0.7666], atol=1e-4)


def test_identity_hessian_reaches_same_optimum():
    p = builtin_problem("unstable-linear")
    rep = solve(p, opts=SolverOptions(hessian="identity", max_iter=2000))
    assert np.abs(rep.tau_star[1:-1] - BENCH_TAU_LINEAR).max() <= 1e-2
    assert rep.optimality <= 1e-6


def test_external_scipy_backend_agrees():
    p = builtin_problem("unstable-linear")
    ext = solve(p, opts=SolverOptions(mode="external"), backend=scipy_backend)
    own = solve(p)
    assert in_delta(ext.delta_star, p)
    np.testing.assert_allclose(ext.tau_star, own.tau_star, atol=1e-4)
    assert ext.J_final == pytest.approx(own.J_final, rel=1e-8)
    assert ext.n_cost_evaluations == len(ext.J_history) > 0


def test_external_problem_contract():
    p = builtin_problem("unstable-linear")
    ext = ExternalProblem(p)
    d = np.full(6, 1 / 6)
    ev = evaluate(p, d)
    assert ext.cost(d) == ev.J
    np.testing.assert_array_equal(ext.gradient(d), ev.grad)
    rows, cols, vals = ext.hessian_lower(d)
    assert np.all(rows >= cols)
    np.testing.assert_array_equal(vals, ev.hess[rows, cols])
    assert ext.n_evaluations == 1  # one shared evaluation per distinct delta
    np.testing.assert_array_equal(ext.A_eq, np.ones((1, 6)))
    np.testing.assert_array_equal(ext.b_eq, [1.0])


def test_every_trial_point_is_feasible(monkeypatch, rng):
    seen = []
    real_eval, real_frozen = nlp.evaluate, nlp.frozen_cost

    def rec_eval(p, delta, **kw):
        seen.append((p, np.array(delta)))
        return real_eval(p, delta, **kw)

    def rec_frozen(cache, delta):
        seen.append((current, np.array(delta)))
        return real_frozen(cache, delta)

    monkeypatch.setattr(nlp, "evaluate", rec_eval)
    monkeypatch.setattr(nlp, "frozen_cost", rec_frozen)
    problems = [random_linear_problem(rng, stable=False) for _ in range(3)]
    problems.append(builtin_problem("fishing", 50))
    bounded = builtin_problem("unstable-linear")
    problems.append(SwitchedProblem(bounded.modes, bounded.x0, bounded.Q, bounded.E, 1.0,
                                    lb=np.full(6, 0.05), ub=np.full(6, 0.3)))
    for current in problems:
        seen.clear()
        rep = solve(current, opts=SolverOptions(max_iter=10, verify=False))
        assert seen
        assert all(in_delta(d, current) for _, d in seen)
        assert in_delta(rep.delta_star, current)


def test_bounds_respected_at_optimum():
    base = builtin_problem("unstable-linear")
    p = SwitchedProblem(base.modes, base.x0, base.Q, base.E, 1.0,
                        lb=np.full(6, 0.12), ub=np.full(6, 0.2))
    rep = solve(p)
    assert rep.termination == CONVERGED
    assert in_delta(rep.delta_star, p, 1e-12)
    # the unconstrained optimum has delta_0 = 0.100 and delta_5 = 0.233
    assert rep.delta_star[0] == pytest.approx(0.12, abs=1e-12)
    assert rep.delta_star[5] == pytest.approx(0.2, abs=1e-12)


def test_history_nonincreasing_linear(rng):
    for _ in range(10):
        p = random_linear_problem(rng, stable=bool(rng.integers(2)))
        rep = solve(p, random_delta(rng, p), SolverOptions(max_iter=30, verify=False))
        assert np.all(np.diff(rep.J_history) <= 0)
        assert rep.J_final == rep.J_history[-1]


def test_history_nonincreasing_monotone_nonlinear():
    p = builtin_problem("fishing", 100)
    rep = solve(p, opts=SolverOptions(max_iter=20, monotone=True, verify=False))
    assert len(rep.J_history) > 1
    assert np.all(np.diff(rep.J_history) <= 0)


def test_collapsed_modes_anywhere_same_optimum():
    # a mode forced to zero length can sit anywhere in the sequence
    base = [LinearMode(A) for A in (A1, A2, A1, A2, A1, A2)]
    args = ([1.0, 1.0], np.eye(2), np.zeros((2, 2)), 1.0)
    ref = solve(SwitchedProblem(base, *args)).J_final
    extra = LinearMode(np.array([[3.0, 0.0], [0.0, 3.0]]))
    for pos in (0, 2, 4, 6):
        modes = base[:pos] + [extra] + base[pos:]
        ub = np.full(7, np.inf)
        ub[pos] = 0.0
        rep = solve(SwitchedProblem(modes, *args, ub=ub))
        assert rep.delta_star[pos] == 0.0
        assert abs(rep.J_final - ref) <= 1e-6 * abs(ref)


def test_deterministic():
    p = builtin_problem("fishing", 50)
    a = solve(p, opts=SolverOptions(max_iter=5, verify=False))
    b = solve(p, opts=SolverOptions(max_iter=5, verify=False))
    np.testing.assert_array_equal(a.delta_star, b.delta_star)
    assert a.J_history == b.J_history


def test_overflow_reported():
    p = SwitchedProblem([LinearMode(np.array([[60.0]])), LinearMode(np.array([[-1.0]]))],
                        [1.0], [[1.0]], [[0.0]], 1.0)
    rep = solve(p, [1.0, 0.0])
    assert rep.termination == nlp.OVERFLOW
    assert not rep.ok


def test_report_dict_roundtrip():
    rep = solve(builtin_problem("unstable-linear"))
    d = rep.to_dict()
    assert d["termination"] == CONVERGED
    np.testing.assert_allclose(d["tau_star"], switching_times(rep.delta_star))
    assert isinstance(d["n_cost_evaluations"], int)
