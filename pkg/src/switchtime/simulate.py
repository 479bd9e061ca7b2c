"""Reference simulation of the true switched dynamics.

Each interval is integrated separately with the Dormand-Prince 4(5) pair so no
step straddles a switch, and the running cost rides along as an extra state.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .problem import SwitchedProblem, switching_times
from .sensitivity import evaluate

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    modes: np.ndarray
    running_cost: np.ndarray
    terminal_cost: float
    tau: np.ndarray

    @property
    def J_oracle(self) -> float:
        return float(self.running_cost[-1] + self.terminal_cost)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _check_delta(p, delta):
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (p.n_modes,):
        raise ValueError(f"delta must have {p.n_modes} entries")
    if np.any(delta < 0):
        raise ValueError(f"negative switching interval: {delta}")
    return delta


def integrate(p: SwitchedProblem, delta, rtol: float = DEFAULT_RTOL,
              atol: float = DEFAULT_ATOL, n_samples: int = 500) -> Trajectory:
    """Simulate ``p`` under intervals ``delta`` and accumulate the quadratic cost.

    Samples are ``n_samples`` uniform times on ``[0, T_delta]`` merged with
    every distinct switching time.
    """
    if not (0 < rtol <= 1e-2 and 0 < atol <= 1e-2):
        raise ValueError("tolerances must lie in (0, 1e-2]")
    delta = _check_delta(p, delta)
    tau = switching_times(delta)
    T_end = tau[-1]
    samples = np.unique(np.concatenate((np.linspace(0.0, T_end, n_samples), tau)))
    n = p.n_x
    Q = p.Q

    z = np.append(p.x0, 0.0)
    times, states, modes, costs = [], [], [], []
    for i, mode in enumerate(p.modes):
        lo, hi = tau[i], tau[i + 1]
        if hi <= lo:
            continue
        last = i == p.n_modes - 1 or np.all(delta[i + 1:] == 0)
        mask = (samples >= lo) & ((samples <= hi) if last else (samples < hi))
        t_eval = samples[mask]

        def rhs(t, y, mode=mode):
            x = y[:n]
            return np.append(mode.f(x), x @ Q @ x)

        sol = solve_ivp(rhs, (lo, hi), z, method="RK45", rtol=rtol, atol=atol,
                        dense_output=True)
        if sol.status != 0:
            raise IntegrationError(f"interval {i}: {sol.message}")
        if not np.all(np.isfinite(sol.y)):
            raise IntegrationError(f"interval {i}: non-finite state")
        Y = sol.sol(t_eval) if t_eval.size else np.empty((n + 1, 0))
        Y[:, t_eval == lo] = z[:, None]
        z = sol.y[:, -1]
        Y[:, t_eval == hi] = z[:, None]
        times.append(t_eval)
        states.append(Y[:n].T)
        costs.append(Y[n])
        modes.append(np.full(t_eval.size, i))

    if not times:
        # T_delta == 0: nothing to integrate
        x = p.x0
        return Trajectory(np.array([0.0]), x[None, :], np.array([0]), np.array([0.0]),
                          float(x @ p.E @ x), tau)
    xT = z[:n]
    return Trajectory(np.concatenate(times), np.vstack(states), np.concatenate(modes),
                      np.concatenate(costs), float(xT @ p.E @ xT), tau)


def linearization_gap(p: SwitchedProblem, delta, rtol: float = DEFAULT_RTOL,
                      atol: float = DEFAULT_ATOL, J_linearized: float | None = None) -> float:
    """Relative gap ``|J_oracle - J_lin| / |J_oracle|`` between simulation and linearization.

    Falls back to the absolute gap, with a warning, when ``J_oracle`` is 0.
    """
    if J_linearized is None:
        J_linearized = evaluate(p, delta).J
    J_oracle = integrate(p, delta, rtol=rtol, atol=atol).J_oracle
    gap = abs(J_oracle - J_linearized)
    if J_oracle == 0:
        warnings.warn("oracle cost is zero; returning the absolute gap", RuntimeWarning)
        return gap
    return gap / abs(J_oracle)
