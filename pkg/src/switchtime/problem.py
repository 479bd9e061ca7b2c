"""Switched problem data, the feasible set of switching intervals, and the
background-grid partition."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

# Background points closer than this (relative to T) to a switching time are
# merged into it.
COINCIDENCE_RTOL = 1e-12
# Allowed relative deviation of sum(delta) from T when partitioning.
HORIZON_RTOL = 1e-9


@dataclass(frozen=True)
class LinearMode:
    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"linear mode matrix must be square, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("linear mode matrix has non-finite entries")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def f(self, x):
        return self.A @ x

    def jac(self, x):
        return self.A


@dataclass(frozen=True)
class NonlinearMode:
    """Vector field ``f`` with Jacobian ``jac``.

    ``name``/``params`` identify builtin modes so problems can be written back
    to JSON; ad-hoc modes leave them empty.
    """

    f: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    n: int
    name: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (callable(self.f) and callable(self.jac)):
            raise TypeError("f and jac must be callable")
        if int(self.n) < 1:
            raise ValueError(f"state dimension must be positive, got {self.n}")


ModeDynamics = Union[LinearMode, NonlinearMode]


def _as_square(M, n, what):
    M = np.array(M, dtype=float)
    if M.shape != (n, n):
        raise ValueError(f"{what} has shape {M.shape}, expected {(n, n)}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{what} has non-finite entries")
    return M


def _check_psd(M, what):
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{what} must be symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -1e-10 * max(np.linalg.norm(M), 1e-300):
        raise ValueError(f"{what} must be positive semidefinite")


@dataclass(frozen=True)
class SwitchedProblem:
    """Fixed mode sequence with quadratic running (``Q``) and terminal (``E``) weights.

    ``lb``/``ub`` bound each switching interval; the defaults are 0 and +inf.
    """

    modes: tuple
    x0: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    T: float
    n_grid: int = 2
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ValueError("at least one mode is required")
        x0 = np.array(self.x0, dtype=float).ravel()
        n = x0.size
        for k, m in enumerate(modes):
            if m.n != n:
                raise ValueError(f"mode {k} has dimension {m.n}, state has {n}")
        Q = _as_square(self.Q, n, "Q")
        E = _as_square(self.E, n, "E")
        _check_psd(Q, "Q")
        _check_psd(E, "E")
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.n_grid) < 2:
            raise ValueError(f"n_grid must be at least 2, got {self.n_grid}")
        nm = len(modes)
        lb = np.zeros(nm) if self.lb is None else np.array(self.lb, dtype=float).ravel()
        ub = np.full(nm, np.inf) if self.ub is None else np.array(self.ub, dtype=float).ravel()
        if lb.shape != (nm,) or ub.shape != (nm,):
            raise ValueError(f"bounds must have one entry per mode ({nm})")
        if np.any(lb < 0) or np.any(lb > ub):
            raise ValueError("bounds must satisfy 0 <= lb <= ub")
        if lb.sum() > self.T * (1 + 1e-12) or ub.sum() < self.T * (1 - 1e-12):
            raise ValueError("constraint set is empty: sum(lb) <= T <= sum(ub) violated")
        for arr in (x0, Q, E, lb, ub):
            arr.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_grid", int(self.n_grid))
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n_x(self) -> int:
        return self.x0.size

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def is_linear(self) -> bool:
        return all(isinstance(m, LinearMode) for m in self.modes)

    def with_grid(self, n_grid: int) -> "SwitchedProblem":
        return SwitchedProblem(self.modes, self.x0, self.Q, self.E, self.T,
                               n_grid, self.lb, self.ub)


def switching_times(delta) -> np.ndarray:
    """Prefix sums ``tau_0 = 0, ..., tau_{N+1} = sum(delta)``."""
    delta = np.asarray(delta, dtype=float)
    return np.concatenate(([0.0], np.cumsum(delta)))


@dataclass(frozen=True)
class GridPartition:
    """Subdivision of every switching interval by the background grid.

    ``sub_times[i]`` holds ``tau_i^0 .. tau_i^{n_i+1}`` and
    ``sub_durations[i]`` the ``n_i + 1`` lengths ``delta_i^j``.
    """

    grid_times: np.ndarray
    tau: np.ndarray
    counts: tuple[int, ...]
    sub_times: tuple[np.ndarray, ...]
    sub_durations: tuple[np.ndarray, ...]

    @property
    def flat_durations(self) -> np.ndarray:
        return np.concatenate(self.sub_durations)


def build_partition(p: SwitchedProblem, delta, *, subdivide: bool = True) -> GridPartition:
    """Split each interval at the background grid points strictly inside it.

    With ``subdivide=False`` no interior points are used (``n_i = 0``), which
    is all linear dynamics need.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (p.n_modes,):
        raise ValueError(f"delta must have {p.n_modes} entries, got shape {delta.shape}")
    if not np.all(np.isfinite(delta)):
        raise ValueError("delta has non-finite entries")
    if np.any(delta < 0):
        raise ValueError(f"negative switching interval: {delta}")
    if abs(delta.sum() - p.T) > HORIZON_RTOL * p.T:
        raise ValueError(f"sum(delta) = {delta.sum()!r} deviates from T = {p.T!r}")

    grid = np.linspace(0.0, p.T, p.n_grid)
    tau = switching_times(delta)
    tol = COINCIDENCE_RTOL * p.T
    counts, times, durs = [], [], []
    for i, d in enumerate(delta):
        lo, hi = tau[i], tau[i + 1]
        if subdivide and d > 2 * tol:
            inner = grid[(grid > lo + tol) & (grid < hi - tol)]
        else:
            inner = grid[:0]
        t = np.concatenate(([lo], inner, [hi]))
        dd = np.diff(t)
        # last piece absorbs rounding so the pieces sum to delta_i
        dd[-1] = max(d - (t[-2] - lo), 0.0)
        counts.append(inner.size)
        times.append(t)
        durs.append(dd)
    return GridPartition(grid, tau, tuple(counts), tuple(times), tuple(durs))


def project_to_delta(delta_raw, p: SwitchedProblem) -> np.ndarray:
    """Euclidean projection onto ``{lb <= delta <= ub, sum(delta) = T}``."""
    v = np.asarray(delta_raw, dtype=float).ravel()
    if v.shape != (p.n_modes,):
        raise ValueError(f"expected {p.n_modes} entries, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("delta_raw has non-finite entries")
    if p.lb.sum() > p.T * (1 + 1e-12) or p.ub.sum() < p.T * (1 - 1e-12):
        raise ValueError("constraint set is empty")
    return project_box_sum(v, p.lb, p.ub, p.T)


def project_box_sum(v, lo, hi, total) -> np.ndarray:
    """Closest point to ``v`` with ``lo <= x <= hi`` and ``sum(x) = total``.

    The solution is ``clip(v - lam, lo, hi)``; the clipped sum is piecewise
    linear and nonincreasing in ``lam`` so ``lam`` is located exactly between
    two breakpoints.  Infinite bounds are allowed.
    """
    v = np.asarray(v, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def s(lam):
        return np.clip(v - lam, lo, hi).sum()

    bps = np.concatenate((v - lo, v - hi))
    bps = np.unique(bps[np.isfinite(bps)])
    if bps.size == 0:
        return v - (v.sum() - total) / v.size
    vals = np.array([s(b) for b in bps])
    k = int(np.searchsorted(-vals, -total, side="left"))
    if k == 0:
        slope = np.count_nonzero(np.isposinf(hi))
        lam = bps[0] - (total - vals[0]) / slope if slope else bps[0]
    elif k == len(bps):
        slope = np.count_nonzero(np.isneginf(lo))
        lam = bps[-1] + (vals[-1] - total) / slope if slope else bps[-1]
    else:
        b0, b1, s0, s1 = bps[k - 1], bps[k], vals[k - 1], vals[k]
        lam = b0 if s0 == s1 else b0 + (s0 - total) / (s0 - s1) * (b1 - b0)
    return np.clip(v - lam, lo, hi)


def equally_spaced(p: SwitchedProblem) -> np.ndarray:
    """Initial intervals ``T/(N+1)`` each, projected if the bounds forbid it."""
    delta = np.full(p.n_modes, p.T / p.n_modes)
    if np.all(delta >= p.lb) and np.all(delta <= p.ub):
        return delta
    return project_to_delta(delta, p)


@dataclass(frozen=True)
class Reference:
    """Affine reference ``r(t) = r0 + rdot * t`` tracked by state components ``tracked``."""

    r0: np.ndarray
    rdot: np.ndarray
    tracked: tuple[int, ...]

    def __post_init__(self):
        r0 = np.array(self.r0, dtype=float).ravel()
        rdot = np.zeros_like(r0) if self.rdot is None else np.array(self.rdot, dtype=float).ravel()
        tracked = tuple(int(k) for k in self.tracked)
        if rdot.shape != r0.shape or len(tracked) != r0.size:
            raise ValueError("reference r0, rdot and tracked must have equal lengths")
        object.__setattr__(self, "r0", r0)
        object.__setattr__(self, "rdot", rdot)
        object.__setattr__(self, "tracked", tracked)


def _augmented_mode(mode: ModeDynamics, n: int, rdot: np.ndarray) -> ModeDynamics:
    m = rdot.size
    if isinstance(mode, LinearMode) and not np.any(rdot):
        A = np.zeros((n + m, n + m))
        A[:n, :n] = mode.A
        return LinearMode(A)

    def f(z, mode=mode):
        return np.concatenate((mode.f(z[:n]), rdot))

    def jac(z, mode=mode):
        J = np.zeros((n + m, n + m))
        J[:n, :n] = mode.jac(z[:n])
        return J

    return NonlinearMode(f, jac, n + m, name=getattr(mode, "name", None),
                         params=dict(getattr(mode, "params", {}) or {}))


def augment_problem(p: SwitchedProblem, reference: Reference | None) -> SwitchedProblem:
    """Append reference states so a tracking cost becomes a regulation cost.

    With ``L = [I, -P]`` (``P`` places the reference into the tracked
    components) the augmented weights are ``L^T Q L`` and ``L^T E L``, so the
    running cost is ``(x - P x_r)^T Q (x - P x_r)``.
    """
    if reference is None:
        return p
    n = p.n_x
    m = reference.r0.size
    if any(k < 0 or k >= n for k in reference.tracked):
        raise ValueError(f"tracked components {reference.tracked} out of range for n_x = {n}")
    if len(set(reference.tracked)) != m:
        raise ValueError("tracked components must be distinct")
    P = np.zeros((n, m))
    for col, k in enumerate(reference.tracked):
        P[k, col] = 1.0
    L = np.hstack((np.eye(n), -P))
    Q = L.T @ p.Q @ L
    E = L.T @ p.E @ L
    modes = tuple(_augmented_mode(md, n, reference.rdot) for md in p.modes)
    x0 = np.concatenate((p.x0, reference.r0))
    return SwitchedProblem(modes, x0, 0.5 * (Q + Q.T), 0.5 * (E + E.T), p.T,
                           p.n_grid, p.lb, p.ub)
