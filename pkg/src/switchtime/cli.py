"""Command-line front end.

    switchtime run --builtin fishing --n-grid 200 --max-iter 20 --out results/
    switchtime run --problem my_problem.json --sweep 10,50,100 --out results/
    switchtime export --builtin tank -o tank.json

``run`` writes ``report.json`` and ``trajectory.csv`` (or ``sweep.csv`` with
``--sweep``) to ``--out``.  Exit status is 0 when every solve ends converged or
at the iteration cap, 1 on a failed solve and 2 on bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .nlpsolve import SolveReport, SolverOptions, solve
from .problem import SwitchedProblem
from .simulate import integrate

EXIT_OK = 0
EXIT_SOLVE_FAILED = 1
EXIT_BAD_INPUT = 2

TRAJECTORY_SAMPLES = 500

logger = logging.getLogger("switchtime")


class InputError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchtime",
                                     description="Optimal switching times for switched systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve a problem and write the results")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", choices=sorted(io.BUILTINS), help="bundled benchmark")
    src.add_argument("--problem", type=Path, help="problem definition (JSON)")
    run.add_argument("--n-grid", type=int, help="background grid size override")
    run.add_argument("--max-iter", type=int,
                     help="iteration cap (default: the benchmark's cap, else 100)")
    run.add_argument("--tol", type=float, help="first-order optimality tolerance (default 1e-8)")
    run.add_argument("--out", type=Path, default=Path("."), help="output directory")
    run.add_argument("--sweep", help="comma-separated grid sizes; writes sweep.csv")
    run.add_argument("--seed-delta", type=Path,
                     help="initial intervals: a JSON list, or a report.json from an earlier run")
    run.add_argument("--no-verify", action="store_true", help="skip the RK45 oracle")
    run.add_argument("-v", "--verbose", action="store_true")

    exp = sub.add_parser("export", help="write a bundled benchmark as a problem file")
    exp.add_argument("--builtin", choices=sorted(io.BUILTINS), required=True)
    exp.add_argument("--n-grid", type=int)
    exp.add_argument("-o", "--output", type=Path, help="destination (default: stdout)")
    return parser


def _parse_grid_list(text: str) -> list[int]:
    try:
        sizes = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise InputError(f"--sweep expects comma-separated integers, got {text!r}") from None
    if not sizes or any(k < 2 for k in sizes):
        raise InputError("--sweep grid sizes must be integers >= 2")
    return sizes


def _load_seed(path: Path, p: SwitchedProblem) -> np.ndarray:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read seed file {path}: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("delta_star", doc.get("delta"))
    try:
        delta = np.asarray(doc, dtype=float)
    except (TypeError, ValueError):
        delta = None
    if delta is None or delta.shape != (p.n_modes,):
        raise InputError(f"seed file {path} must hold {p.n_modes} interval lengths")
    return delta


def _problem_doc(args) -> dict:
    if args.builtin:
        return io.builtin_dict(args.builtin)
    try:
        return json.loads(Path(args.problem).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read problem file {args.problem}: {exc}") from None


def _options(args) -> SolverOptions:
    kw = {"verify": not args.no_verify}
    if args.max_iter is not None:
        kw["max_iter"] = args.max_iter
    elif args.builtin:
        kw["max_iter"] = io.BUILTIN_ITERATIONS[args.builtin]
    if args.tol is not None:
        kw["tol"] = args.tol
    elif args.builtin:
        kw["tol"] = io.BUILTIN_TOL[args.builtin]
    try:
        return SolverOptions(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _make_problem(doc: dict, n_grid: int | None) -> SwitchedProblem:
    if n_grid is not None:
        doc = dict(doc, n_grid=int(n_grid))
    try:
        return io.problem_from_dict(doc)
    except io.ProblemFileError as exc:
        raise InputError(f"invalid problem: {exc}") from None


def report_document(report: SolveReport, source: str, p: SwitchedProblem) -> dict:
    out = report.to_dict()
    out["source"] = source
    out["n_grid"] = p.n_grid
    return out


def validate_report(doc: dict) -> None:
    jsonschema.Draft202012Validator(io._schema("report.schema.json")).validate(doc)


def write_trajectory(path: Path, p: SwitchedProblem, delta, n_samples: int = TRAJECTORY_SAMPLES) -> int:
    """Sample the simulated trajectory at ``delta``; returns the number of rows."""
    traj = integrate(p, delta, n_samples=n_samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{k + 1}" for k in range(p.n_x)] + ["mode", "running_cost"])
        for t, x, m, c in zip(traj.times, traj.states, traj.modes, traj.running_cost):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [int(m), repr(float(c))])
    return traj.times.size


SWEEP_COLUMNS = ["n_grid", "J_oracle", "J_linearized", "delta_J_percent", "n_J_eval", "time"]


def _sweep(doc, sizes, args, opts, out: Path) -> int:
    rows, status = [], EXIT_OK
    for k in sizes:
        p = _make_problem(doc, k)
        delta0 = _load_seed(args.seed_delta, p) if args.seed_delta else None
        r = solve(p, delta0, opts)
        gap = None if r.linearization_gap is None else 100.0 * r.linearization_gap
        rows.append([k, r.J_oracle, r.J_final, gap, r.n_cost_evaluations, r.wall_time])
        print(f"n_grid={k:4d}  J={r.J_final:.6f}  J_oracle={_fmt(r.J_oracle)}  "
              f"dJ%={_fmt(gap)}  evals={r.n_cost_evaluations}  {r.termination}")
        if not r.ok:
            status = EXIT_SOLVE_FAILED
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return status


def _fmt(v):
    return "n/a" if v is None else f"{v:.6g}"


def cmd_run(args) -> int:
    doc = _problem_doc(args)
    source = args.builtin or str(args.problem)
    opts = _options(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    if args.sweep:
        return _sweep(doc, _parse_grid_list(args.sweep), args, opts, out)

    p = _make_problem(doc, args.n_grid)
    delta0 = _load_seed(args.seed_delta, p) if args.seed_delta else None
    try:
        report = solve(p, delta0, opts)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    rep = report_document(report, source, p)
    validate_report(rep)
    (out / "report.json").write_text(json.dumps(rep, indent=2) + "\n")
    if np.isfinite(report.J_final):
        write_trajectory(out / "trajectory.csv", p, report.delta_star)
    tau = ", ".join(f"{t:.4f}" for t in report.tau_star[1:-1])
    print(f"{source}: {report.termination} after {report.n_iterations} iterations, "
          f"{report.n_cost_evaluations} cost evaluations")
    print(f"  J = {report.J_final:.6f}   J_oracle = {_fmt(report.J_oracle)}")
    print(f"  tau* = [{tau}]")
    return EXIT_OK if report.ok else EXIT_SOLVE_FAILED


def cmd_export(args) -> int:
    doc = io.builtin_dict(args.builtin)
    if args.n_grid is not None:
        doc["n_grid"] = int(args.n_grid)
    io.validate_problem_dict(doc)
    text = json.dumps(doc, indent=2) + "\n"
    if args.output is None:
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_export(args)
    except (InputError, io.ProblemFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
