"""Problem files (JSON) and the bundled benchmark problems.

A problem document describes the un-augmented system; an optional
``reference`` block is folded in with :func:`augment_problem` on load.
"""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .problem import LinearMode, NonlinearMode, Reference, SwitchedProblem, augment_problem


class ProblemFileError(ValueError):
    """Unreadable or schema-violating problem document."""


def lotka_volterra(c1: float, c2: float, u: float) -> NonlinearMode:
    def f(x):
        return np.array([x[0] - x[0] * x[1] - c1 * x[0] * u,
                         -x[1] + x[0] * x[1] - c2 * x[1] * u])

    def jac(x):
        return np.array([[1.0 - x[1] - c1 * u, -x[0]],
                         [x[1], x[0] - 1.0 - c2 * u]])

    return NonlinearMode(f, jac, 2, name="lotka_volterra", params={"c1": c1, "c2": c2, "u": u})


def double_tank(u: float) -> NonlinearMode:
    # levels are clamped at zero so the square roots stay real
    def f(x):
        s1, s2 = np.sqrt(max(x[0], 0.0)), np.sqrt(max(x[1], 0.0))
        return np.array([-s1 + u, s1 - s2])

    def jac(x):
        h1 = 0.5 / np.sqrt(x[0]) if x[0] > 0 else 0.0
        h2 = 0.5 / np.sqrt(x[1]) if x[1] > 0 else 0.0
        return np.array([[-h1, 0.0], [h1, -h2]])

    return NonlinearMode(f, jac, 2, name="double_tank", params={"u": u})


NONLINEAR_MODES = {"lotka_volterra": lotka_volterra, "double_tank": double_tank}


def _schema(name: str) -> dict:
    text = resources.files("switchtime").joinpath("schemas", name).read_text()
    return json.loads(text)


def validate_problem_dict(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(_schema("problem.schema.json"))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(k) for k in e.absolute_path) or "<root>"
        raise ProblemFileError(f"{path}: {e.message}")


def _mode_from_dict(entry: dict, k: int):
    if "A" in entry:
        try:
            return LinearMode(entry["A"])
        except ValueError as exc:
            raise ProblemFileError(f"modes/{k}/A: {exc}") from None
    (name, params), = entry.items()
    try:
        return NONLINEAR_MODES[name](**params)
    except TypeError as exc:
        raise ProblemFileError(f"modes/{k}/{name}: {exc}") from None


def problem_from_dict(doc: dict) -> SwitchedProblem:
    """Build (and augment, if a reference is given) a problem from a document."""
    validate_problem_dict(doc)
    n = doc["n_x"]
    modes = [_mode_from_dict(m, k) for k, m in enumerate(doc["modes"])]
    for k, m in enumerate(modes):
        if m.n != n:
            raise ProblemFileError(f"modes/{k}: dimension {m.n} does not match n_x = {n}")
    for key in ("Q", "E"):
        if np.shape(doc[key]) != (n, n):
            raise ProblemFileError(f"{key}: expected a {n}x{n} matrix")
    if len(doc["x0"]) != n:
        raise ProblemFileError(f"x0: expected {n} entries")
    try:
        ub = doc.get("ub")
        if ub is not None:
            ub = [np.inf if v is None else v for v in ub]
        p = SwitchedProblem(modes, doc["x0"], doc["Q"], doc["E"], doc["T"],
                            doc.get("n_grid", 2), doc.get("lb"), ub)
        ref = doc.get("reference")
        if ref is not None:
            p = augment_problem(p, Reference(ref["r0"], ref.get("rdot"), ref["tracked"]))
    except ValueError as exc:
        raise ProblemFileError(str(exc)) from None
    return p


def load_problem_file(path) -> SwitchedProblem:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ProblemFileError(f"cannot read problem file {path}: {exc}") from None
    return problem_from_dict(doc)


# Benchmark data.  The mode sequences alternate two dynamics.  The tank
# inputs {1, 2} and reference slope -0.05 are the values under which the
# benchmark reference schedule reproduces the reference cost; the nominal
# description ({2, 3}, slope -0.5) cannot track the reference at all.
_UNSTABLE_A = ([[-1.0, 0.0], [1.0, 2.0]], [[1.0, 1.0], [1.0, -2.0]])

BUILTINS = {
    "unstable-linear": {
        "n_x": 2,
        "modes": [{"A": _UNSTABLE_A[k % 2]} for k in range(6)],
        "x0": [1.0, 1.0],
        "Q": [[1.0, 0.0], [0.0, 1.0]],
        "E": [[0.0, 0.0], [0.0, 0.0]],
        "T": 1.0,
        "n_grid": 2,
    },
    "fishing": {
        "n_x": 2,
        "modes": [{"lotka_volterra": {"c1": 0.4, "c2": 0.2, "u": float(k % 2)}} for k in range(9)],
        "x0": [0.5, 0.7],
        "Q": [[1.0, 0.0], [0.0, 1.0]],
        "E": [[0.0, 0.0], [0.0, 0.0]],
        "T": 12.0,
        "n_grid": 200,
        "reference": {"r0": [1.0, 1.0], "rdot": [0.0, 0.0], "tracked": [0, 1]},
    },
    "tank": {
        "n_x": 2,
        "modes": [{"double_tank": {"u": 1.0 if k % 2 == 0 else 2.0}} for k in range(16)],
        "x0": [2.0, 2.0],
        "Q": [[0.0, 0.0], [0.0, 1.0]],
        "E": [[0.0, 0.0], [0.0, 0.0]],
        "T": 10.0,
        "n_grid": 100,
        "reference": {"r0": [3.0], "rdot": [-0.05], "tracked": [1]},
    },
}

BUILTIN_ITERATIONS = {"unstable-linear": 100, "fishing": 20, "tank": 15}
BUILTIN_TOL = {"unstable-linear": 1e-8, "fishing": 1e-8, "tank": 1e-8}


def builtin_dict(name: str) -> dict:
    try:
        return copy.deepcopy(BUILTINS[name])
    except KeyError:
        raise ProblemFileError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}") from None


def builtin_problem(name: str, n_grid: int | None = None) -> SwitchedProblem:
    doc = builtin_dict(name)
    if n_grid is not None:
        doc["n_grid"] = int(n_grid)
    return problem_from_dict(doc)
