import math
import warnings

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from switchtime.io import builtin_problem
from switchtime.problem import LinearMode, SwitchedProblem
from switchtime.sensitivity import evaluate
from switchtime.simulate import integrate, linearization_gap

from conftest import random_delta, random_linear_problem

BENCH_TAU_FISHING = np.array([2.446, 4.150, 4.533, 4.799, 5.436, 5.616, 6.969, 7.033])


def test_zero_dynamics_cost():
    x0 = np.array([0.5, -1.5])
    p = SwitchedProblem([LinearMode(np.zeros((2, 2)))], x0, np.eye(2), np.zeros((2, 2)), 1.0)
    assert integrate(p, [1.0]).J_oracle == pytest.approx(x0 @ x0, rel=1e-8)


def test_scalar_decay_closed_form():
    p = SwitchedProblem([LinearMode(np.array([[-1.0]]))], [1.0], [[1.0]], [[0.0]], 1.0)
    J = integrate(p, [1.0], rtol=1e-10, atol=1e-12).J_oracle
    assert abs(J - (1 - math.exp(-2)) / 2) <= 1e-8


def test_terminal_cost_included():
    p = SwitchedProblem([LinearMode(np.array([[-1.0]]))], [1.0], [[0.0]], [[2.0]], 1.0)
    traj = integrate(p, [1.0], rtol=1e-10, atol=1e-12)
    assert traj.J_oracle == pytest.approx(2 * math.exp(-2), rel=1e-8)
    assert traj.terminal_cost == pytest.approx(traj.J_oracle)


def test_fishing_oracle_at_reference_optimum():
    p = builtin_problem("fishing")
    delta = np.diff(np.concatenate(([0.0], BENCH_TAU_FISHING, [12.0])))
    J = integrate(p, delta).J_oracle
    assert J == pytest.approx(1.3455877397700093, rel=1e-6)
    assert abs(J - 1.3456) <= 0.01 * 1.3456  # benchmark reference value


def test_trajectory_structure():
    p = builtin_problem("tank", 100)
    delta = np.array([0.0] + [10 / 15] * 15)
    traj = integrate(p, delta, n_samples=500)
    assert traj.times.size >= 500
    assert np.all(np.diff(traj.times) > 0)
    for tau in traj.tau[1:]:
        assert np.any(np.isclose(traj.times, tau, rtol=0, atol=1e-12))
    # mode index steps only at switching times
    changes = np.flatnonzero(np.diff(traj.modes)) + 1
    for k in changes:
        assert np.any(np.isclose(traj.times[k], traj.tau, atol=1e-12))
    assert 0 not in traj.modes  # zero-length first interval is skipped
    assert np.all(np.diff(traj.running_cost) >= -1e-12)
    assert traj.J_oracle == pytest.approx(traj.running_cost[-1] + traj.terminal_cost)


def test_self_convergence():
    p = builtin_problem("fishing")
    delta = np.diff(np.concatenate(([0.0], BENCH_TAU_FISHING, [12.0])))
    prev = None
    for rtol in (1e-5, 5e-6, 2.5e-6, 1.25e-6):
        J = integrate(p, delta, rtol=rtol, atol=rtol * 1e-2).J_oracle
        if prev is not None:
            assert abs(J - prev) <= 2 * prev_rtol * abs(prev)
        prev, prev_rtol = J, rtol


def test_restart_equals_single_call():
    # same vector field split at arbitrary times: restarting must not change the answer
    from switchtime.io import lotka_volterra

    rtol = 1e-10
    mode = lotka_volterra(0.4, 0.2, 1.0)
    single = SwitchedProblem([mode], [0.5, 0.7], np.eye(2), np.zeros((2, 2)), 12.0)
    split = SwitchedProblem([mode] * 9, [0.5, 0.7], np.eye(2), np.zeros((2, 2)), 12.0)
    delta = np.diff(np.concatenate(([0.0], BENCH_TAU_FISHING, [12.0])))
    x_one = integrate(single, [12.0], rtol=rtol, atol=1e-12).final_state
    x_cat = integrate(split, delta, rtol=rtol, atol=1e-12).final_state
    assert np.linalg.norm(x_one - x_cat) <= 10 * rtol * np.linalg.norm(x_one)


def test_restart_beats_straddling_steps():
    # against a tight reference, restarting at switches is more accurate than
    # letting steps cross the discontinuities
    p = builtin_problem("fishing")
    delta = np.diff(np.concatenate(([0.0], BENCH_TAU_FISHING, [12.0])))
    tau = np.concatenate(([0.0], np.cumsum(delta)))
    x = p.x0.copy()
    for i, mode in enumerate(p.modes):
        x = solve_ivp(lambda t, y, m=mode: m.f(y), (tau[i], tau[i + 1]), x, method="DOP853",
                      rtol=1e-13, atol=1e-15).y[:, -1]

    def rhs(t, y):
        i = min(np.searchsorted(tau, t, side="right") - 1, p.n_modes - 1)
        return p.modes[i].f(y)

    rtol = 1e-8
    one = solve_ivp(rhs, (0, 12.0), p.x0, method="RK45", rtol=rtol, atol=1e-10).y[:, -1]
    restarted = integrate(p, delta, rtol=rtol, atol=1e-10).final_state
    assert np.linalg.norm(restarted - x) < np.linalg.norm(one - x)
    assert np.linalg.norm(restarted - x) <= 10 * rtol * np.linalg.norm(x)


def test_linear_states_match_sensitivity(rng):
    rtol = 1e-9
    for _ in range(5):
        p = random_linear_problem(rng, stable=False)
        delta = random_delta(rng, p)
        xs = evaluate(p, delta).cache.switching_states
        traj = integrate(p, delta, rtol=rtol, atol=1e-12)
        for i, tau in enumerate(traj.tau):
            k = np.argmin(np.abs(traj.times - tau))
            if i < len(traj.tau) - 1:
                # first sample of interval i is the state at tau_i
                k = np.flatnonzero(np.isclose(traj.times, tau, atol=1e-13))[0]
            assert np.linalg.norm(traj.states[k] - xs[i]) <= 10 * rtol * max(np.linalg.norm(xs[i]), 1)


def test_linear_gap_tiny(rng):
    for _ in range(5):
        p = random_linear_problem(rng, stable=False)
        assert linearization_gap(p, random_delta(rng, p), rtol=1e-10, atol=1e-12) <= 1e-8


def test_gap_zero_oracle_warns():
    p = SwitchedProblem([LinearMode(np.eye(1))], [0.0], [[1.0]], [[0.0]], 1.0)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert linearization_gap(p, [1.0]) == 0.0
    assert any("absolute" in str(x.message) for x in w)


def test_tolerance_and_delta_errors():
    p = builtin_problem("unstable-linear")
    with pytest.raises(ValueError):
        integrate(p, np.full(6, 1 / 6), rtol=0.1)
    with pytest.raises(ValueError):
        integrate(p, np.full(6, 1 / 6), rtol=0.0)
    with pytest.raises(ValueError):
        integrate(p, [-0.1, 0.3, 0.2, 0.2, 0.2, 0.2])
    with pytest.raises(ValueError):
        integrate(p, [0.5, 0.5])
