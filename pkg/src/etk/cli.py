"""Command-line front end.

Subcommands::

    etk ot          --cost C.csv --mu a.json --nu b.json [--gamma 1] [--tol 1e-8]
    etk barycenter  --measures DIR [--cost C.csv] [--mode primal|dual] [--eps 1e-6]
    etk equilibrium --model NAME --config cfg.json [--eps 1e-4] [--p 0|1]
    etk bench sinkhorn --n 100 --seed 7

Matrices are header-free row-major CSV. Measures are JSON: a plain list of
weights, ``{"weights": [...]}``, or ``{"points": [[...], ...], "weights": [...]}``;
point clouds imply squared-Euclidean costs. Results are printed as JSON (or
written to ``--out``). Exit status is 0 on convergence, 2 when a tolerance
was not reached and 1 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import barycenter as bary
from . import equilibrium as eq
from .core_ot import (
    StoppingRule,
    as_cost,
    marginal_residual,
    solve_entropic_ot,
    squared_distances,
)
from .exceptions import DivergenceError, ToleranceNotReached

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_TOLERANCE = 2

TRACE_FIELDS = ("iteration", "objective", "residual", "gap", "curvature", "wall_time")


class InputError(ValueError):
    """Malformed or inconsistent input files and flags."""


@dataclass
class Measure:
    weights: np.ndarray
    raw_total: float
    points: np.ndarray | None = None


# ---------------------------------------------------------------------------
# parsing


def read_matrix(path) -> np.ndarray:
    """Header-free CSV of floats; errors name the offending line."""
    rows = []
    text = Path(path).read_text()
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            rows.append([float(cell) for cell in row])
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected numbers, got {','.join(row)!r}") from None
        if len(rows[-1]) != len(rows[0]):
            raise InputError(f"{path}:{lineno}: row has {len(rows[-1])} entries, expected {len(rows[0])}")
    if not rows:
        raise InputError(f"{path}: empty matrix")
    return np.array(rows)


def write_matrix(path, a: np.ndarray) -> None:
    np.savetxt(path, np.asarray(a), delimiter=",", fmt="%.17g")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from None


def read_measure(path) -> Measure:
    data = _load_json(path)
    points = None
    if isinstance(data, dict):
        if "weights" not in data:
            raise InputError(f"{path}: measure object needs a 'weights' field")
        weights = data["weights"]
        if "points" in data:
            points = np.atleast_2d(np.asarray(data["points"], dtype=float))
    else:
        weights = data
    try:
        w = np.asarray(weights, dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{path}: weights must be a list of numbers") from None
    if w.ndim != 1 or w.size == 0:
        raise InputError(f"{path}: weights must be a non-empty flat list")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InputError(f"{path}: weights must be finite and nonnegative")
    total = float(w.sum())
    if total <= 0:
        raise InputError(f"{path}: weights sum to zero")
    if points is not None and points.shape[0] != w.size:
        raise InputError(f"{path}: {points.shape[0]} points but {w.size} weights")
    return Measure(w / total, total, points)


def _cost_from(args_cost, measures: list[Measure]) -> np.ndarray:
    if args_cost is not None:
        c = read_matrix(args_cost)
    else:
        pts = [m.points for m in measures]
        if any(p is None for p in pts):
            raise InputError("no --cost given and not every measure carries points")
        if any(p.shape != pts[0].shape or not np.array_equal(p, pts[0]) for p in pts):
            raise InputError("point-cloud measures must share the same support points")
        c = squared_distances(pts[0])
    try:
        return as_cost(c, measures[0].weights.size)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def parse_inputs(command: str, args: argparse.Namespace) -> dict:
    """Read files named by ``args`` into solver inputs.

    Raises
    ------
    InputError
        On malformed files, shape mismatches, negative costs or marginal
        totals that differ by more than 1e-9 before normalisation.
    """
    if command == "ot":
        mu, nu = read_measure(args.mu), read_measure(args.nu)
        if mu.weights.size != nu.weights.size:
            raise InputError(f"marginals have sizes {mu.weights.size} and {nu.weights.size}")
        _check_totals(mu.raw_total, nu.raw_total)
        return {"cost": _cost_from(args.cost, [mu, nu]), "L": mu.weights, "W": nu.weights}
    if command == "barycenter":
        folder = Path(args.measures)
        files = sorted(folder.glob("*.json"))
        if not files:
            raise InputError(f"{folder}: no .json measures found")
        measures = [read_measure(f) for f in files]
        if len({m.weights.size for m in measures}) != 1:
            raise InputError("all measures must have the same number of support points")
        return {"cost": _cost_from(args.cost, measures), "measures": [m.weights for m in measures],
                "files": [f.name for f in files]}
    if command == "equilibrium":
        cfg = _load_json(args.config) if args.config else {}
        if not isinstance(cfg, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
        if args.cost is not None:
            cfg["base"] = read_matrix(args.cost).tolist()
        if "base" not in cfg:
            raise InputError("equilibrium needs a base cost (--cost or 'base' in the config)")
        try:
            model = eq.build_cost_model(args.model, cfg)
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(str(exc)) from None
        n = model.n
        if args.mu is not None:
            mu = read_measure(args.mu)
        else:
            w = np.asarray(cfg.get("L", np.ones(n)), dtype=float)
            mu = Measure(w / w.sum(), float(w.sum()))
        if args.nu is not None:
            nu = read_measure(args.nu)
        else:
            w = np.asarray(cfg.get("W", np.ones(n)), dtype=float)
            nu = Measure(w / w.sum(), float(w.sum()))
        if mu.weights.size != n or nu.weights.size != n:
            raise InputError(f"marginals must have length {n}")
        _check_totals(mu.raw_total, nu.raw_total)
        lower = np.broadcast_to(np.asarray(cfg.get("lower", 0.0), dtype=float), (model.dim,))
        return {"model": model, "L": mu.weights, "W": nu.weights, "Q": eq.FeasibleSet(lower)}
    raise InputError(f"unknown command {command!r}")


def _check_totals(a: float, b: float) -> None:
    if abs(a - b) > 1e-9:
        raise InputError(
            f"marginal totals differ ({a!r} vs {b!r}); "
            "a transport plan with both marginals cannot exist"
        )


# ---------------------------------------------------------------------------
# trace output


class Trace:
    def __init__(self, path) -> None:
        self.path = path
        self.rows: list[dict] = []
        self.t0 = time.perf_counter()

    def add(self, iteration, objective=float("nan"), residual=float("nan"), gap=float("nan"),
            curvature=float("nan")) -> None:
        self.rows.append({"iteration": iteration, "objective": objective, "residual": residual,
                          "gap": gap, "curvature": curvature,
                          "wall_time": time.perf_counter() - self.t0})

    def from_record(self, rec) -> None:
        self.add(rec.k, rec.best_F, rec.info.get("residuals", {}).get("residual", float("nan")),
                 rec.gap, rec.M)

    def write(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# commands


def _run_ot(args, inp, trace: Trace) -> tuple[dict, int]:
    stop = StoppingRule("residual", args.tol, args.max_iter)
    rep = solve_entropic_ot(inp["cost"], inp["L"], inp["W"], args.gamma, stop,
                            callback=lambda k, r: trace.add(k, residual=r))
    if args.plan_out:
        write_matrix(args.plan_out, rep.plan.entries)
    row, col, res = marginal_residual(rep.plan, inp["L"], inp["W"])
    out = {
        "value": rep.value,
        "dual_objective": rep.dual_objective,
        "iterations": rep.iterations,
        "residual": res,
        "row_residual": float(np.abs(row).max()),
        "column_residual": float(np.abs(col).max()),
        "converged": rep.converged,
        "lam": rep.duals.lam.tolist(),
        "mu": rep.duals.mu.tolist(),
    }
    return out, EXIT_OK if rep.converged else EXIT_TOLERANCE


def _barycenter_once(args, problem, trace: Trace, init=None):
    if args.mode == "primal":
        L, hist = bary.barycenter_primal(problem, args.eps, max_iter=args.max_iter,
                                         threads=args.threads, callback=trace.from_record)
        return None, L, hist, {}
    state, L, hist = bary.barycenter_dual(problem, args.eps, max_iter=args.max_iter, init=init,
                                          threads=args.threads, callback=trace.from_record)
    return state, L, hist, {"spread": hist.info["spread"]}


def _run_barycenter(args, inp, trace: Trace) -> tuple[dict, int]:
    measures = inp["measures"]
    r = args.window_shift
    out: dict = {"mode": args.mode, "measures": inp["files"]}
    if r:
        if args.mode != "dual":
            raise InputError("--window-shift needs --mode dual")
        if not 0 < r < len(measures) - 1:
            raise InputError(f"--window-shift {r} leaves no overlapping window of {len(measures)} measures")
        first = bary.BarycenterProblem(tuple(measures[:-r]), inp["cost"], args.gamma)
        state, _, hist0, _ = _barycenter_once(args, first, Trace(None))
        out["first_window_iterations"] = hist0.iterations
        window = bary.BarycenterProblem(tuple(measures[r:]), inp["cost"], args.gamma)
        init = bary.warm_start_shift(state, r)
        out["window"] = inp["files"][r:]
    else:
        window = bary.BarycenterProblem(tuple(measures), inp["cost"], args.gamma)
        init = None
    _, L, hist, extra = _barycenter_once(args, window, trace, init)
    out.update(
        barycenter=L.tolist(),
        objective=hist.info["objective"],
        iterations=hist.iterations,
        oracle_calls=hist.oracle_calls,
        certificate=hist.certificate,
        converged=hist.converged,
        **extra,
    )
    return out, EXIT_OK if hist.converged else EXIT_TOLERANCE


def _run_equilibrium(args, inp, trace: Trace) -> tuple[dict, int]:
    rep = eq.solve_equilibrium(inp["model"], inp["L"], inp["W"], inp["Q"], args.eps, args.p,
                               max_iter=args.max_iter, callback=trace.from_record)
    if args.plan_out:
        write_matrix(args.plan_out, rep.plan.entries)
    _, _, res = marginal_residual(rep.plan, inp["L"], inp["W"])
    out = {
        "model": args.model,
        "y": rep.y.tolist(),
        "value": rep.f,
        "iterations": rep.outer_iterations,
        "inner_iterations": rep.inner_iterations,
        "residual": res,
        "certificate": rep.history.certificate,
        "converged": rep.converged,
    }
    return out, EXIT_OK if rep.converged else EXIT_TOLERANCE


def bench_instance(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform [0, 1] costs and uniform marginals from one 64-bit seed."""
    rng = np.random.default_rng(np.uint64(seed))
    return rng.uniform(0.0, 1.0, (n, n)), np.full(n, 1.0 / n), np.full(n, 1.0 / n)


def _run_bench(args, trace: Trace) -> tuple[dict, int]:
    if args.target != "sinkhorn":
        raise InputError(f"unknown benchmark {args.target!r}")
    c, L, W = bench_instance(args.n, args.seed)
    stop = StoppingRule("relative_residual", args.tol, args.max_iter)
    t0 = time.perf_counter()
    rep = solve_entropic_ot(c, L, W, args.gamma, stop, callback=lambda k, r: trace.add(k, residual=r))
    wall = time.perf_counter() - t0
    b = float(np.sqrt(L @ L + W @ W))
    out = {
        "benchmark": "sinkhorn",
        "n": args.n,
        "seed": args.seed,
        "iterations": rep.iterations,
        "relative_residual": rep.marginal_residual / b,
        "value": rep.value,
        "converged": rep.converged,
        "wall_time": wall,
    }
    return out, EXIT_OK if rep.converged else EXIT_TOLERANCE


def run_command(args: argparse.Namespace) -> tuple[int, dict]:
    """Run one subcommand; returns the exit status and the result object."""
    trace = Trace(args.trace)
    t0 = time.perf_counter()
    if args.command == "bench":
        out, status = _run_bench(args, trace)
    else:
        inp = parse_inputs(args.command, args)
        runner = {"ot": _run_ot, "barycenter": _run_barycenter, "equilibrium": _run_equilibrium}
        out, status = runner[args.command](args, inp, trace)
    out = {"command": args.command, **out}
    if args.no_timing:
        out.pop("wall_time", None)
    else:
        out["timing"] = {"total_seconds": time.perf_counter() - t0}
    trace.write()
    return status, out


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are input errors, not tolerance failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _threads_default() -> int | None:
    env = os.environ.get("ETK_THREADS")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        return None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--gamma", type=float, default=1.0, help="entropy weight")
    common.add_argument("--max-iter", type=int, default=None)
    common.add_argument("--trace", help="write one CSV row per iteration here")
    common.add_argument("--out", help="write the result JSON here instead of stdout")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=_threads_default(),
                        help="worker threads for independent subproblems (env ETK_THREADS)")
    common.add_argument("--no-timing", action="store_true",
                        help="omit wall-clock fields so output is reproducible byte for byte")

    parser = _Parser(prog="etk", description="Entropic optimal transport toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_ot = sub.add_parser("ot", parents=[common], help="solve one entropic transport problem")
    p_ot.add_argument("--cost")
    p_ot.add_argument("--mu", required=True)
    p_ot.add_argument("--nu", required=True)
    p_ot.add_argument("--tol", type=float, default=1e-8)
    p_ot.add_argument("--plan-out")

    p_b = sub.add_parser("barycenter", parents=[common], help="barycenter of a folder of measures")
    p_b.add_argument("--measures", required=True)
    p_b.add_argument("--cost")
    p_b.add_argument("--mode", choices=("primal", "dual"), default="dual")
    p_b.add_argument("--eps", type=float, default=1e-6)
    p_b.add_argument("--window-shift", type=int, default=0)

    p_e = sub.add_parser("equilibrium", parents=[common], help="transport equilibrium")
    p_e.add_argument("--model", default="toy", choices=sorted(eq.COST_MODELS))
    p_e.add_argument("--config")
    p_e.add_argument("--cost")
    p_e.add_argument("--mu")
    p_e.add_argument("--nu")
    p_e.add_argument("--eps", type=float, default=1e-4)
    p_e.add_argument("--p", type=int, choices=(0, 1), default=None)
    p_e.add_argument("--plan-out")

    p_bench = sub.add_parser("bench", parents=[common], help="timing benchmarks")
    p_bench.add_argument("target", choices=("sinkhorn",))
    p_bench.add_argument("--n", type=int, default=100)
    p_bench.add_argument("--tol", type=float, default=0.01, help="relative marginal residual")
    return parser


_DEFAULT_MAX_ITER = {"ot": 100_000, "barycenter": 20_000, "equilibrium": 10_000, "bench": 100_000}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.max_iter is None:
        args.max_iter = _DEFAULT_MAX_ITER[args.command]
    try:
        status, out = run_command(args)
    except (InputError, OSError, ValueError) as exc:
        print(f"etk: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ToleranceNotReached, DivergenceError) as exc:
        print(f"etk: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    text = json.dumps(out, indent=2, sort_keys=True, allow_nan=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
