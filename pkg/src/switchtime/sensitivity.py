"""Cost, gradient and Hessian of the grid-linearized switching problem.

One call to :func:`evaluate` linearizes the dynamics at every switching time
and background grid point, exponentiates each piece once, and reuses the
resulting transition matrices and Gramians for the cost and both derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .linalg import EigenCache, precompute_eigen, van_loan, van_loan_eigen
from .problem import GridPartition, LinearMode, SwitchedProblem, build_partition

OVERFLOW_LIMIT = 1e15


class PropagationOverflow(ArithmeticError):
    """The linearized state left ``OVERFLOW_LIMIT``; the candidate is unusable."""


def linearize_at(mode, x: np.ndarray) -> np.ndarray:
    """Augmented linearization ``[[J, f - J x], [0, 0]]`` of ``mode`` at ``x``.

    ``x`` carries the trailing constant 1.  Linear modes come back as-is.
    """
    if isinstance(mode, LinearMode):
        return mode.A
    xs = np.asarray(x[:-1], dtype=float)
    fx = np.asarray(mode.f(xs), dtype=float)
    J = np.asarray(mode.jac(xs), dtype=float)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(J))):
        raise FloatingPointError(f"non-finite dynamics at x = {xs}")
    n = xs.size
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = J
    A[:n, n] = fx - J @ xs
    return A


def _embed(mode):
    """Augmented-state linearizer for a linear mode inside a nonlinear problem."""
    A = np.zeros((mode.n + 1, mode.n + 1))
    A[:-1, :-1] = mode.A
    return A


@dataclass(frozen=True)
class LinearizationCache:
    """Per-piece linearizations, exponentials, Gramians and propagated states.

    ``A[i][j]``, ``Emat[i][j]``, ``Mmat[i][j]`` belong to piece ``j`` of
    interval ``i``; ``states[i]`` has rows ``x_i^0 .. x_i^{n_i+1}``.
    """

    partition: GridPartition
    augmented: bool
    Q: np.ndarray
    E: np.ndarray
    A: tuple
    Emat: tuple
    Mmat: tuple
    states: tuple

    @property
    def n_intervals(self) -> int:
        return len(self.A)

    @property
    def switching_states(self) -> np.ndarray:
        """Rows ``x_0 .. x_{N+1}``."""
        rows = [s[0] for s in self.states] + [self.states[-1][-1]]
        return np.array(rows)


def augmented_weights(p: SwitchedProblem, augmented: bool):
    if not augmented:
        return p.Q, p.E
    return block_diag(p.Q, 0.0), block_diag(p.E, 0.0)


def build_cache(p: SwitchedProblem, partition: GridPartition, *,
                eigen: EigenCache | None = None) -> LinearizationCache:
    """Linearize, exponentiate and propagate over every piece in time order."""
    augmented = not p.is_linear
    Q, E = augmented_weights(p, augmented)
    x = np.append(p.x0, 1.0) if augmented else p.x0.copy()
    As, Es, Ms, Xs = [], [], [], []
    for i, mode in enumerate(p.modes):
        durs = partition.sub_durations[i]
        Ai, Ei, Mi, Xi = [], [], [], [x]
        for d in durs:
            if not augmented:
                A = mode.A
                if eigen is not None and eigen.diagonalizable[i]:
                    vl = van_loan_eigen(eigen, i, d)
                else:
                    vl = van_loan(A, Q, d)
            else:
                A = linearize_at(mode, x) if not isinstance(mode, LinearMode) else _embed(mode)
                vl = van_loan(A, Q, d)
            x = vl.Emat @ x
            if not np.all(np.isfinite(x)) or np.abs(x).max() > OVERFLOW_LIMIT:
                raise PropagationOverflow(
                    f"state norm exceeded {OVERFLOW_LIMIT:g} in interval {i}")
            Ai.append(A)
            Ei.append(vl.Emat)
            Mi.append(vl.Mmat)
            Xi.append(x)
        As.append(tuple(Ai))
        Es.append(tuple(Ei))
        Ms.append(tuple(Mi))
        Xs.append(np.array(Xi))
    return LinearizationCache(partition, augmented, Q, E, tuple(As), tuple(Es),
                              tuple(Ms), tuple(Xs))


def _fold(S_next, Ej, Mj):
    S = Mj + Ej.T @ S_next @ Ej
    return 0.5 * (S + S.T)


def compute_S(cache: LinearizationCache):
    """Backward cost-to-go recursion ``S^j = M^j + E^jT S^{j+1} E^j``.

    Returns ``(S, S_sub)``: ``S[i]`` for ``i = 0..N+1`` (terminal ``S[N+1] =
    E``) and ``S_sub[i][j]`` for every piece start ``tau_i^j``.
    """
    n_int = cache.n_intervals
    S_next = cache.E.copy()
    S = [None] * (n_int + 1)
    S[n_int] = S_next
    S_sub = [None] * n_int
    for i in range(n_int - 1, -1, -1):
        rows = [None] * len(cache.Emat[i])
        for j in range(len(cache.Emat[i]) - 1, -1, -1):
            S_next = _fold(S_next, cache.Emat[i][j], cache.Mmat[i][j])
            rows[j] = S_next
        S_sub[i] = tuple(rows)
        S[i] = S_next
    if not all(np.all(np.isfinite(s)) for s in S):
        raise FloatingPointError("cost-to-go recursion produced non-finite values")
    return tuple(S), tuple(S_sub)


def compute_C(S, cache: LinearizationCache):
    """``C_i = Q + A_i^T S_{i+1} + S_{i+1} A_i`` with the last-piece linearization."""
    out = []
    for i in range(cache.n_intervals):
        A = cache.A[i][-1]
        SA = S[i + 1] @ A
        out.append(cache.Q + SA.T + SA)
    return tuple(out)


def interval_transitions(cache: LinearizationCache):
    """Product of the piece exponentials across each whole interval."""
    out = []
    for Ei in cache.Emat:
        P = Ei[0]
        for Ej in Ei[1:]:
            P = Ej @ P
        out.append(P)
    return out


def compute_phi(cache: LinearizationCache) -> np.ndarray:
    """Dense table ``phi[l, i] = Phi(tau_l, tau_i)`` for ``i <= l``; NaN elsewhere."""
    n_int = cache.n_intervals
    n = cache.Q.shape[0]
    trans = interval_transitions(cache)
    phi = np.full((n_int + 1, n_int + 1, n, n), np.nan)
    for i in range(n_int + 1):
        phi[i, i] = np.eye(n)
        for l in range(i, n_int):
            phi[l + 1, i] = trans[l] @ phi[l, i]
    return phi


def transition(phi: np.ndarray, l: int, i: int) -> np.ndarray:
    if l < i:
        raise ValueError(f"transitions run forward only (l={l} < i={i})")
    return phi[l, i]


@dataclass(frozen=True)
class CostEvaluation:
    J: float
    grad: np.ndarray
    hess: np.ndarray
    S: tuple
    C: tuple
    phi: np.ndarray
    cache: LinearizationCache
    S_sub: tuple


def hessian_entry(cache, C, phi, i: int, l: int) -> float:
    """``2 x_{l+1}^T C_l Phi(tau_{l+1}, tau_{i+1}) A_i x_{i+1}`` for ``l >= i``."""
    xs = cache.switching_states
    v = cache.A[i][-1] @ xs[i + 1]
    w = C[l] @ xs[l + 1]
    return 2.0 * float(w @ (transition(phi, l + 1, i + 1) @ v))


def _assemble(cache, S, C, phi):
    xs = cache.switching_states
    n_int = cache.n_intervals
    x0 = xs[0]
    J = float(x0 @ S[0] @ x0)
    grad = np.array([xs[i + 1] @ C[i] @ xs[i + 1] for i in range(n_int)])
    v = [cache.A[i][-1] @ xs[i + 1] for i in range(n_int)]
    w = [2.0 * (C[l] @ xs[l + 1]) for l in range(n_int)]
    hess = np.empty((n_int, n_int))
    for i in range(n_int):
        for l in range(i, n_int):
            hess[i, l] = float(w[l] @ (phi[l + 1, i + 1] @ v[i]))
            hess[l, i] = hess[i, l]
    return J, grad, hess


def evaluate(p: SwitchedProblem, delta, *, eigen: EigenCache | None = None,
             linear_fast_path: bool = True) -> CostEvaluation:
    """Cost, gradient and Hessian at ``delta`` from one set of shared precomputations.

    Linear problems skip the background grid and, when possible, use the
    eigendecomposition path unless ``linear_fast_path`` is False.
    """
    fast = p.is_linear and linear_fast_path
    partition = build_partition(p, delta, subdivide=not fast)
    if fast and eigen is None:
        eigen = precompute_eigen(p.modes, p.Q)
    cache = build_cache(p, partition, eigen=eigen if fast else None)
    S, S_sub = compute_S(cache)
    C = compute_C(S, cache)
    phi = compute_phi(cache)
    J, grad, hess = _assemble(cache, S, C, phi)
    return CostEvaluation(J, grad, hess, S, C, phi, cache, S_sub)


def expanded_cost(cache: LinearizationCache) -> float:
    """Cost summed piece by piece: ``sum x^T M x + x_{N+1}^T E x_{N+1}``."""
    total = 0.0
    for Mi, Xi in zip(cache.Mmat, cache.states):
        for j, M in enumerate(Mi):
            total += float(Xi[j] @ M @ Xi[j])
    xT = cache.states[-1][-1]
    return total + float(xT @ cache.E @ xT)


def _frozen_durations(durs: np.ndarray, total: float) -> np.ndarray:
    """Piece durations summing to ``total`` with the tail absorbing the change.

    Growth goes to the last piece; shrinking eats pieces from the end.
    """
    out = np.array(durs, dtype=float)
    excess = total - out.sum()
    if excess >= 0:
        out[-1] += excess
        return out
    for j in range(out.size - 1, -1, -1):
        take = min(out[j], -excess)
        out[j] -= take
        excess += take
        if excess >= 0:
            break
    return out


def frozen_cost(cache: LinearizationCache, delta) -> float:
    """Cost at ``delta`` with every linearization held at the cached values.

    This is the smooth model that the analytic gradient and Hessian
    differentiate; it agrees with the re-linearized cost at the cached point.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (cache.n_intervals,):
        raise ValueError(f"delta must have {cache.n_intervals} entries")
    S = cache.E
    for i in range(cache.n_intervals - 1, -1, -1):
        old = cache.partition.sub_durations[i]
        new = _frozen_durations(old, delta[i])
        for j in range(new.size - 1, -1, -1):
            if new[j] == old[j]:
                Ej, Mj = cache.Emat[i][j], cache.Mmat[i][j]
            else:
                Ej, Mj = van_loan(cache.A[i][j], cache.Q, new[j])
            S = _fold(S, Ej, Mj)
    x0 = cache.states[0][0]
    J = float(x0 @ S @ x0)
    if not np.isfinite(J) or abs(J) > OVERFLOW_LIMIT ** 2:
        raise PropagationOverflow("frozen-model cost overflowed")
    return J


def frozen_perturbation_cost(cache: LinearizationCache, S_sub, i: int, eps: float) -> float:
    """Cost after stretching the last piece of interval ``i`` by ``eps``.

    Every linearization stays frozen and later intervals shift rigidly, which
    is the model the analytic derivatives differentiate.
    """
    durs = cache.partition.sub_durations[i]
    last = len(durs) - 1
    d = durs[last] + eps
    if d < 0:
        raise ValueError(f"eps = {eps} makes the last piece of interval {i} negative")
    S_after = S_sub[i + 1][0] if i + 1 < cache.n_intervals else cache.E
    if eps == 0:
        E_last, M_last = cache.Emat[i][last], cache.Mmat[i][last]
    else:
        E_last, M_last = van_loan(cache.A[i][last], cache.Q, d)
    S = _fold(S_after, E_last, M_last)
    for j in range(last - 1, -1, -1):
        S = _fold(S, cache.Emat[i][j], cache.Mmat[i][j])
    for k in range(i - 1, -1, -1):
        for j in range(len(cache.Emat[k]) - 1, -1, -1):
            S = _fold(S, cache.Emat[k][j], cache.Mmat[k][j])
    x0 = cache.states[0][0]
    return float(x0 @ S @ x0)
