import numpy as np
import pytest

from switchtime.problem import LinearMode, SwitchedProblem


def random_psd(rng, n, rank=None):
    B = rng.standard_normal((n, rank or n))
    return B @ B.T / n


def random_stable(rng, n, margin=0.3):
    """Random matrix with spectral abscissa <= -margin."""
    A = rng.standard_normal((n, n))
    shift = np.max(np.linalg.eigvals(A).real) + margin
    return A - shift * np.eye(n)


def random_linear_problem(rng, n=None, n_modes=None, stable=True, T=1.0, E=True, n_grid=2):
    n = n or int(rng.integers(2, 5))
    n_modes = n_modes or int(rng.integers(2, 7))
    if stable:
        mats = [random_stable(rng, n) for _ in range(n_modes)]
    else:
        mats = [rng.standard_normal((n, n)) for _ in range(n_modes)]
    Emat = random_psd(rng, n) if E else np.zeros((n, n))
    return SwitchedProblem([LinearMode(A) for A in mats], rng.standard_normal(n),
                           random_psd(rng, n), Emat, T, n_grid)


def random_delta(rng, p, floor=0.05):
    """Feasible interior delta, every entry at least ``floor * T / n_modes``."""
    w = rng.uniform(0.0, 1.0, p.n_modes) + floor
    return p.T * w / w.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance criteria report one line each; collected here so the lines are
# shown in the terminal summary even when output capture is on
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
