"""Matrix exponential kernels.

``expm`` is a degree-13 scaling-and-squaring Pade scheme (Higham 2005).
``van_loan`` obtains the transition matrix ``e^{A d}`` and the weighted
Gramian ``int_0^d e^{A^T s} Q e^{A s} ds`` from a single exponential of the
block matrix ``[[-A^T, Q], [0, A]]``.  For constant (linear) modes the block
matrix can be diagonalized once and re-exponentiated at any duration with
scalar exponentials, see ``precompute_eigen`` / ``van_loan_eigen``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Pade numerator coefficients b_k for degrees 3, 5, 7, 9, 13.
_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
# 1-norm thresholds below which degree m needs no scaling (double precision).
_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}

EIGEN_COND_LIMIT = 1e8


def _pade_uv(A: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE[m]
    ident = np.eye(A.shape[0])
    A2 = A @ A
    if m == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
             + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
        return U, V
    powers = [ident, A2]
    for _ in range(2, (m + 1) // 2):
        powers.append(powers[-1] @ A2)
    U = A @ sum(b[2 * k + 1] * powers[k] for k in range(len(powers)))
    V = sum(b[2 * k] * powers[k] for k in range(len(powers)))
    return U, V


def expm(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a diagonal Pade approximant.

    Raises
    ------
    ValueError
        If ``M`` is not square or has non-finite entries.
    """
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("expm input contains NaN or Inf")
    n = A.shape[0]
    if n == 0:
        return A.copy()
    norm1 = np.linalg.norm(A, 1)
    if norm1 == 0.0:
        return np.eye(n)

    for m in (3, 5, 7, 9):
        if norm1 <= _THETA[m]:
            U, V = _pade_uv(A, m)
            return np.linalg.solve(V - U, V + U)

    s = max(0, int(np.ceil(np.log2(norm1 / _THETA[13]))))
    As = A / (2.0 ** s)
    U, V = _pade_uv(As, 13)
    X = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        X = X @ X
    return X


class VanLoanResult(NamedTuple):
    """Transition matrix ``Emat = e^{A d}`` and Gramian ``Mmat``."""

    Emat: np.ndarray
    Mmat: np.ndarray


def block_generator(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Return the 2n x 2n block matrix ``[[-A^T, Q], [0, A]]``."""
    n = A.shape[0]
    G = np.zeros((2 * n, 2 * n))
    G[:n, :n] = -A.T
    G[:n, n:] = Q
    G[n:, n:] = A
    return G


def _extract(Z: np.ndarray, n: int) -> VanLoanResult:
    Z2 = Z[:n, n:]
    Z3 = Z[n:, n:]
    M = Z3.T @ Z2
    return VanLoanResult(Z3.copy(), 0.5 * (M + M.T))


def van_loan(A, Q, delta: float) -> VanLoanResult:
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if Q.shape != A.shape:
        raise ValueError(f"Q has shape {Q.shape}, expected {A.shape}")
    if delta < 0:
        raise ValueError(f"duration must be nonnegative, got {delta}")
    n = A.shape[0]
    if delta == 0:
        return VanLoanResult(np.eye(n), np.zeros((n, n)))
    Z = expm(block_generator(A, Q) * delta)
    return _extract(Z, n)


@dataclass(frozen=True)
class EigenCache:
    """Offline eigendecompositions of the Van Loan generators of linear modes.

    Entries for modes flagged non-diagonalizable hold the generator only;
    ``van_loan_eigen`` refuses them and callers fall back to ``van_loan``.
    """

    n: int
    generators: tuple[np.ndarray, ...]
    eigvals: tuple[np.ndarray | None, ...]
    Y: tuple[np.ndarray | None, ...]
    Y_inv: tuple[np.ndarray | None, ...]
    diagonalizable: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.generators)


def precompute_eigen(modes: Sequence, Q) -> EigenCache:
    """Diagonalize ``G_i = [[-A_i^T, Q], [0, A_i]]`` for every linear mode.

    ``modes`` may hold raw matrices or objects with an ``A`` attribute.  A
    mode whose eigenvector matrix is singular or has condition number above
    ``EIGEN_COND_LIMIT`` is flagged for the ``expm`` fallback.
    """
    Q = np.asarray(Q, dtype=float)
    gens, lams, Ys, Yinvs, flags = [], [], [], [], []
    memo: dict[int, tuple] = {}
    for mode in modes:
        A = np.asarray(getattr(mode, "A", mode), dtype=float)
        key = id(getattr(mode, "A", mode))
        if key in memo:
            entry = memo[key]
        else:
            G = block_generator(A, Q)
            entry = (G, *_diagonalize(G))
            memo[key] = entry
        G, lam, Y, Yinv, ok = entry
        gens.append(G)
        lams.append(lam)
        Ys.append(Y)
        Yinvs.append(Yinv)
        flags.append(ok)
    return EigenCache(Q.shape[0], tuple(gens), tuple(lams), tuple(Ys),
                      tuple(Yinvs), tuple(flags))


def _diagonalize(G: np.ndarray):
    lam, Y = np.linalg.eig(G)
    cond = np.linalg.cond(Y)
    if not np.isfinite(cond) or cond > EIGEN_COND_LIMIT:
        return None, None, None, False
    Yinv = np.linalg.inv(Y)
    scale = max(np.linalg.norm(G), 1.0)
    if np.linalg.norm((Y * lam) @ Yinv - G) > 1e-8 * scale:
        return None, None, None, False
    return lam, Y, Yinv, True


def van_loan_eigen(cache: EigenCache, i: int, delta: float) -> VanLoanResult:
    """Van Loan matrices of mode ``i`` from its cached eigendecomposition."""
    if not cache.diagonalizable[i]:
        raise ValueError(f"mode {i} is not diagonalizable; use van_loan")
    if delta < 0:
        raise ValueError(f"duration must be nonnegative, got {delta}")
    n = cache.n
    if delta == 0:
        return VanLoanResult(np.eye(n), np.zeros((n, n)))
    Zc = (cache.Y[i] * np.exp(cache.eigvals[i] * delta)) @ cache.Y_inv[i]
    Z = Zc.real
    if np.abs(Zc.imag).max() > 1e-8 * max(np.linalg.norm(Z), 1.0):
        logger.debug("eigen path produced complex residue for mode %d; using expm", i)
        return _extract(expm(cache.generators[i] * delta), n)
    return _extract(Z, n)
