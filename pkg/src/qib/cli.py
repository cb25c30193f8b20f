"""Command-line entry point: ``qib solve|check|oracle|decompose|gen``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import dp, gen, graph, qcqp, sketch, verify
from .model import (NormalizationTransform, Problem, ValidationError, denormalize_solution, normalize,
                    normalize_point, problem_from_dict, problem_to_dict, zero_image)

log = logging.getLogger("qib")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
DEFAULT_EPS = Fraction(1, 10)


@dataclass
class RunConfig:
    instance: str | None = None
    eps: Fraction = DEFAULT_EPS
    td: str | None = None
    out: str | None = None
    threads: int = 1
    trace: bool = False
    feas_tol: float = qcqp.FEAS_TOL
    extra: dict = field(default_factory=dict)


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise SystemExit(f"qib: {name} must be a number, got {raw!r}")


# -- output helpers ---------------------------------------------------------------

def _round(v):
    """12 significant digits for every float, recursively."""
    if isinstance(v, float):
        return float(f"{v:.12g}") if math.isfinite(v) else None
    if isinstance(v, (np.floating,)):
        return _round(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_round(a) for a in v.tolist()]
    if isinstance(v, dict):
        return {k: _round(a) for k, a in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round(a) for a in v]
    return v


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(_round(obj), indent=1, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_problem(path: str) -> Problem:
    return problem_from_dict(_read_json(path))


def _report_text(items) -> str:
    out = []
    for k, v in items:
        v = _round(v)
        out.append(f"{k}: {json.dumps(v) if isinstance(v, (list, dict, bool)) or v is None else v}")
    return "\n".join(out) + "\n"


# -- pipeline -----------------------------------------------------------------------

@dataclass
class PipelineResult:
    normalized: Problem
    transform: NormalizationTransform
    decomposition: graph.RootedBinaryDecomposition
    outcome: dp.DpOutcome
    certificate: dp.Certificate | None
    report: verify.CheckReport | None
    x: np.ndarray | None
    z: np.ndarray | None
    objective: float | None


def _supplied_decomposition(path: str, q: Problem):
    td = graph.load_decomposition(path)
    if isinstance(td, graph.TreeDecomposition):
        td = graph.cover_missing(td, q)
    return td


def recheck(p: Problem, x, z, eps, feas_tol: float = qcqp.FEAS_TOL):
    """Report for an original-space point, measured on the normalized
    instance where the violation bound applies."""
    q, t = normalize(p)
    z = np.asarray(z, dtype=int)
    xn = normalize_point(t, np.asarray(x, dtype=float), z)
    return verify.check_solution(q, xn, z, eps, feas_tol)


def pipeline(p: Problem, cfg: RunConfig) -> PipelineResult:
    """validate, normalize, decompose, sketch, DP, certificate, check."""
    q, t = normalize(p)
    supplied = _supplied_decomposition(cfg.td, q) if cfg.td else None
    rbd = graph.decompose(q, supplied)
    log.info("decomposition: %d nodes, width %d", rbd.n_nodes, rbd.width)
    sets = sketch.enumerate_all(q, cfg.eps, cfg.threads, cfg.feas_tol)
    for s in sets:
        limit = sketch.sketch_bound(cfg.eps, len(s.constraints))
        if s.evaluated > limit:
            raise AssertionError(f"block {s.block}: {s.evaluated} sketch keys exceed {limit}")
        log.info("block %d: %d sketches, %d keys, %d solves", s.block, len(s), s.evaluated, s.solves)
    outcome = dp.run_dp(q, rbd, cfg.eps, sets)
    if cfg.trace:
        sys.stderr.write(outcome.trace())
    if not outcome.feasible:
        return PipelineResult(q, t, rbd, outcome, None, None, None, None, None)
    cert = dp.extract_certificate(q, rbd, outcome, sets)
    x, _ = denormalize_solution(t, cert.x, 0.0, cert.z)
    # the file stores 12 digits; measure that point so check reproduces the report
    x = np.array(_round(x), dtype=float)
    obj = p.objective_value(x, cert.z)
    report = recheck(p, x, cert.z, cfg.eps, cfg.feas_tol)
    cert.report = report
    return PipelineResult(q, t, rbd, outcome, cert, report, x, cert.z, obj)


def solution_dict(res: PipelineResult, eps: Fraction) -> dict:
    if res.certificate is None:
        return {"status": "infeasible", "x": None, "z": None, "objective": None,
                "max_mixed_infeasibility": None, "combinatorial_feasible": None,
                "epsilon": str(eps), "dp_value": None, "report": None}
    r = res.report
    return {"status": "solution", "x": res.x, "z": [int(v) for v in res.z], "objective": res.objective,
            "max_mixed_infeasibility": r.max_mixed_violation, "combinatorial_feasible": r.combinatorial_ok,
            "epsilon": str(eps), "dp_value": res.outcome.value, "report": r.to_dict()}


# -- commands -------------------------------------------------------------------------

def cmd_solve(cfg: RunConfig) -> int:
    p = load_problem(cfg.instance)
    res = pipeline(p, cfg)
    _write_json(solution_dict(res, cfg.eps), cfg.out)
    return EXIT_OK if res.certificate is not None else EXIT_INFEASIBLE


def cmd_check(cfg: RunConfig) -> int:
    p = load_problem(cfg.instance)
    sol = _read_json(cfg.extra["solution"])
    if sol.get("status") == "infeasible" or sol.get("x") is None:
        sys.stdout.write("status: infeasible\n")
        return EXIT_INFEASIBLE
    eps = cfg.extra.get("eps") or (Fraction(sol["epsilon"]) if sol.get("epsilon") else None)
    rep = recheck(p, sol["x"], sol["z"], eps, cfg.feas_tol)
    items = [("status", "solution")] + list(rep.to_dict().items())
    if eps is not None:
        items.append(("epsilon", str(eps)))
    text = _report_text(items)
    if cfg.out:
        _write_json(rep.to_dict(), cfg.out)
    sys.stdout.write(text)
    return EXIT_OK if (rep.within_bound if eps is not None else rep.combinatorial_ok) else EXIT_INFEASIBLE


def cmd_oracle(cfg: RunConfig) -> int:
    p = load_problem(cfg.instance)
    q, t = normalize(p)
    res = verify.oracle_solve(q, cfg.feas_tol, origin=zero_image(t))
    items = [("status", res.status), ("patterns_solved", res.count), ("nodes", res.nodes)]
    sol = {"status": "infeasible", "x": None, "z": None, "objective": None,
           "max_mixed_infeasibility": None, "combinatorial_feasible": None}
    if res.optimal:
        x, _ = denormalize_solution(t, res.x, 0.0, res.z)
        obj = p.objective_value(x, res.z)
        rep = recheck(p, x, res.z, None, cfg.feas_tol)
        items += [("objective", obj), ("z", [int(v) for v in res.z]), ("x", x),
                  ("max_mixed_violation", rep.max_mixed_violation), ("combinatorial_ok", rep.combinatorial_ok)]
        sol = {"status": "solution", "x": x, "z": [int(v) for v in res.z], "objective": obj,
               "max_mixed_infeasibility": rep.max_mixed_violation, "combinatorial_feasible": rep.combinatorial_ok,
               "report": rep.to_dict()}
    sys.stdout.write(_report_text(items))
    if cfg.out:
        _write_json(sol, cfg.out)
    return EXIT_OK if res.optimal else EXIT_INFEASIBLE


def cmd_decompose(cfg: RunConfig) -> int:
    p = load_problem(cfg.instance)
    q, _ = normalize(p)
    supplied = _supplied_decomposition(cfg.td, q) if cfg.td else None
    rbd = graph.decompose(q, supplied)
    _write_json(rbd.to_dict(), cfg.out)
    sys.stderr.write(f"width {rbd.width}, {rbd.n_nodes} nodes\n")
    return EXIT_OK


# -- gen ----------------------------------------------------------------------------------

def _random_portfolio(rng, n: int, H: int, R: int, N: int) -> gen.PortfolioData:
    return gen.PortfolioData(rng.uniform(0.5, 2.0, H), rng.normal(size=(H, n)), rng.uniform(0, 0.3, n),
                             rng.uniform(0, 1, n), rng.uniform(0, 1, (R, n)), rng.uniform(0.5, 1.5, R),
                             rng.uniform(0.5, 1.5, n), N)


def _random_banded(rng, n: int, k: int) -> gen.BandedData:
    M = np.tril(np.triu(rng.normal(size=(n, n)), -k))
    return gen.BandedData(M @ M.T + 0.3 * np.eye(n), rng.normal(size=n), rng.uniform(-0.5, 1.0, n), k)


def _portfolio_from(raw: dict) -> gen.PortfolioData:
    n = len(raw["mu"])
    pairs = raw.get("eigenpairs", [])
    lam = [float(e["lambda"]) for e in pairs]
    V = np.array([e["vector"] for e in pairs], dtype=float).reshape(len(pairs), n)
    A = np.array(raw.get("A", []), dtype=float).reshape(-1, n)
    return gen.PortfolioData(lam, V, raw.get("d", [0.0] * n), raw["mu"], A, raw.get("b", []),
                             raw["u"], int(raw["N"]), raw.get("u_minus"),
                             None if raw.get("A_minus") is None else np.array(raw["A_minus"], dtype=float),
                             raw.get("N_plus"), raw.get("N_minus"))


def cmd_gen(args) -> int:
    rng = np.random.default_rng(args.seed)
    td = None
    kind = args.kind
    if kind == "w3":
        p = gen.gen_subsetsum_w3(gen.SubsetSumData(args.a0, args.a))
        td = graph.add_to_all_bags(gen.w3_decomposition(len(args.a)), [p.m - 1])
    elif kind == "2row":
        p = gen.gen_2row(gen.SubsetSumData(args.a0, args.a, args.N), args.d)
    elif kind == "portfolio":
        data = (_portfolio_from(_read_json(args.data)) if args.data
                else _random_portfolio(rng, args.n, args.H, args.R, args.N if args.N is not None else args.n))
        p = gen.gen_portfolio_longshort(data) if args.longshort else gen.gen_portfolio(data)
    elif kind == "banded":
        if args.data:
            raw = _read_json(args.data)
            data = gen.BandedData(np.array(raw["Q"], dtype=float), raw["c"], raw["d"], raw.get("k"))
        else:
            data = _random_banded(rng, args.n, args.k)
        p = gen.gen_banded(data)
        td = gen.banded_decomposition(p.m, data.arrays()[3])
    elif kind == "truss":
        raw = _read_json(args.data)
        p = gen.gen_truss(raw["A"], raw["b"], raw["blocks"], int(raw["N"]), (raw["lower"], raw["upper"]))
    else:
        n = args.n
        sizes = [int(rng.integers(1, 3)) for _ in range(n)]
        p = gen.gen_random(rng, n, sizes, args.mixed, args.comb)
    _write_json(problem_to_dict(p), args.out)
    if args.td_out:
        if td is None:
            raise ValueError(f"{kind} has no companion decomposition")
        _write_json(td.to_dict(), args.td_out)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

def _eps_args(sp):
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--epsilon", type=float, help="accuracy in (0, 1)")
    g.add_argument("--epsilon-denominator", type=int, metavar="Q", help="use epsilon = 1/Q exactly")


def _eps_from(args, default=DEFAULT_EPS):
    if getattr(args, "epsilon_denominator", None) is not None:
        if args.epsilon_denominator < 2:
            raise ValueError("--epsilon-denominator must be at least 2")
        return Fraction(1, args.epsilon_denominator)
    if getattr(args, "epsilon", None) is not None:
        return sketch.as_fraction(args.epsilon)
    return default


class _Parser(argparse.ArgumentParser):
    # usage errors share the error exit code instead of argparse's 2,
    # which means "infeasible" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="qib", description="Block-indicator convex QCQP solver.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="run the sketch DP and write a solution file")
    sp.add_argument("instance")
    _eps_args(sp)
    sp.add_argument("--td", help="decomposition file")
    sp.add_argument("--out", help="solution file (default stdout)")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.add_argument("--trace", action="store_true", help="per-node table sizes on stderr")

    sp = sub.add_parser("check", help="report on a solution file")
    sp.add_argument("instance")
    sp.add_argument("solution")
    _eps_args(sp)
    sp.add_argument("--out", help="also write the report as JSON")

    sp = sub.add_parser("oracle", help="exact optimum by enumeration")
    sp.add_argument("instance")
    sp.add_argument("--out", help="solution file")

    sp = sub.add_parser("decompose", help="write the rooted binary decomposition")
    sp.add_argument("instance")
    sp.add_argument("--td", help="start from this decomposition")
    sp.add_argument("--out", help="decomposition file (default stdout)")

    sp = sub.add_parser("gen", help="generate an instance")
    sp.add_argument("kind", choices=["w3", "2row", "portfolio", "banded", "truss", "random"])
    sp.add_argument("--a", type=int, nargs="+", help="subset-sum items")
    sp.add_argument("--a0", type=int, help="subset-sum target")
    sp.add_argument("--N", type=int, help="cardinality")
    sp.add_argument("--d", type=float, nargs="+", help="2row weights")
    sp.add_argument("--data", help="JSON data file")
    sp.add_argument("--longshort", action="store_true")
    sp.add_argument("--n", type=int, default=4, help="size for random fills")
    sp.add_argument("--H", type=int, default=1)
    sp.add_argument("--R", type=int, default=1)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--mixed", type=int, default=3)
    sp.add_argument("--comb", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="instance file (default stdout)")
    sp.add_argument("--td-out", help="companion decomposition file")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "gen":
            if args.kind in ("w3", "2row") and (args.a is None or args.a0 is None):
                ap.error(f"gen {args.kind} needs --a and --a0")
            if args.kind == "truss" and not args.data:
                ap.error("gen truss needs --data")
            return cmd_gen(args)
        cfg = RunConfig(instance=args.instance, eps=_eps_from(args), td=getattr(args, "td", None),
                        out=getattr(args, "out", None), threads=max(1, getattr(args, "threads", 1)),
                        trace=getattr(args, "trace", False),
                        feas_tol=_env_float("QIB_FEAS_TOL", qcqp.FEAS_TOL))
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "check":
            cfg.extra = {"solution": args.solution,
                         "eps": _eps_from(args, None)}
            return cmd_check(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        return cmd_decompose(cfg)
    except ValidationError as exc:
        for v in exc.violations:
            sys.stderr.write(f"qib: invalid instance: {v}\n")
    except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError, graph.InvalidDecomposition,
            verify.TooLarge, qcqp.NumericalFailure, dp.CorruptTable, AssertionError) as exc:
        sys.stderr.write(f"qib: {type(exc).__name__}: {exc}\n")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
