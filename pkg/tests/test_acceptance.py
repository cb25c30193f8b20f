"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines appear at
the end of the session) or directly with ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import itertools
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import support  # noqa: E402
from qib import dp, gen, graph, model, qcqp, sketch, verify  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}

EPSILONS = (Fraction(1, 2), Fraction(1, 4), Fraction(1, 10))
VAL_TOL = 1e-7
FEAS_TOL = 1e-8


def _record(n: int, ok: bool, detail: str) -> tuple[bool, str]:
    RESULTS[n] = (ok, detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok, detail


def _state_bound(run: support.Run, t: int) -> int:
    q = sketch.levels(run.eps)
    return (2 * q) ** len(run.rbd.bag_mixed(t)) * (run.q.comb_support + 1) ** len(run.rbd.bag_combinatorial(t))


def _bound_failures(run: support.Run) -> list[str]:
    """State-table and sketch-count bound violations of one run."""
    bad = []
    for st in run.outcome.stats:
        if st.size > _state_bound(run, st.node):
            bad.append(f"node {st.node}: {st.size} states > {_state_bound(run, st.node)}")
    q = sketch.levels(run.eps)
    for s in run.sets:
        if s.evaluated > 2 * (2 * q) ** len(s.constraints):
            bad.append(f"block {s.block}: {s.evaluated} keys > {2 * (2 * q) ** len(s.constraints)}")
    return bad


# -- 1 ---------------------------------------------------------------------------

def criterion_1():
    """Superoptimality and bounded infeasibility on random instances."""
    t0 = time.time()
    failures, n_opt = [], 0
    for s in range(200):
        rng = np.random.default_rng(10_000 + s)
        eps = EPSILONS[s % 3]
        p = support.random_problem(rng, max_blocks=6, max_size=2, max_mixed=4 if eps > Fraction(1, 10) else 3,
                                   max_comb=2)
        assert p.n <= 12 and p.n_blocks <= 6 and p.m <= 6
        q, _ = model.normalize(p)
        run = support.Run(q, eps, normalized=True)
        orc = run.oracle()
        n_opt += orc.optimal
        verdict = verify.compare(run.outcome, orc, q.n_blocks, VAL_TOL)
        if not verdict:
            failures.append(f"seed {s}: {verdict.reason}")
        if run.cert is not None:
            rep = run.report
            width = max((len(q.incidence[r]) for r in q.mixed_ids), default=0)
            if not rep.combinatorial_ok:
                failures.append(f"seed {s}: combinatorial row violated")
            if rep.max_mixed_violation > width * float(eps) + FEAS_TOL:
                failures.append(f"seed {s}: violation {rep.max_mixed_violation:.3g} > {width * float(eps):.3g}")
    elapsed = time.time() - t0
    if elapsed >= 300:
        failures.append(f"runtime {elapsed:.0f}s >= 300s")
    return _record(1, not failures, f"200 instances ({n_opt} with an optimum), {elapsed:.1f}s"
                   + (f"; {failures[:3]}" if failures else ""))


# -- 2 ---------------------------------------------------------------------------

def criterion_2():
    """Without mixed rows the DP is exact."""
    t0 = time.time()
    failures = []
    for s in range(50):
        rng = np.random.default_rng(20_000 + s)
        nb = int(rng.integers(1, 8))
        p = gen.gen_random(rng, nb, [int(rng.integers(1, 3)) for _ in range(nb)], 0, int(rng.integers(1, 4)))
        run = support.Run(p, Fraction(1, 2))
        orc = run.oracle()
        if orc.optimal != run.outcome.feasible:
            failures.append(f"seed {s}: status {run.outcome.status} vs {orc.status}")
        elif orc.optimal and abs(run.outcome.value - orc.value) > 1e-12 * (1 + abs(orc.value)):
            failures.append(f"seed {s}: {run.outcome.value!r} != {orc.value!r}")
    elapsed = time.time() - t0
    if elapsed >= 60:
        failures.append(f"runtime {elapsed:.0f}s >= 60s")
    return _record(2, not failures, f"50 instances, {elapsed:.1f}s" + (f"; {failures[:3]}" if failures else ""))


# -- 3 ---------------------------------------------------------------------------

def criterion_3():
    """Three-nonzero gadget is feasible exactly when the subset sum is."""
    t0 = time.time()
    count, failures = 0, []
    for n in range(1, 5):
        for a in itertools.combinations_with_replacement(range(2, 10), n):
            for a0 in range(1, sum(a) + 2):
                q, t = model.normalize(gen.gen_subsetsum_w3(gen.SubsetSumData(a0, list(a))))
                orc = verify.oracle_solve(q, origin=model.zero_image(t))
                count += 1
                if orc.optimal != support.subset_sum(a, a0):
                    failures.append(f"a={a} a0={a0}: oracle {orc.status}")
    elapsed = time.time() - t0
    if elapsed >= 600:
        failures.append(f"runtime {elapsed:.0f}s >= 600s")
    return _record(3, not failures, f"{count} instances (n <= 4, 2 <= a_j <= 9, 1 <= a0 <= sum+1), {elapsed:.1f}s"
                   + (f"; {failures[:3]}" if failures else ""))


# -- 4 ---------------------------------------------------------------------------

def criterion_4():
    """Two-row instance has optimum at most N exactly when some N-subset hits a0."""
    failures = []
    count = 0
    for s in range(60):
        rng = np.random.default_rng(40_000 + s)
        n = int(rng.integers(2, 11))
        a = [int(v) for v in rng.integers(2, 21, n)]
        N = int(rng.integers(1, n + 1))
        if s % 2:
            a0 = int(sum(rng.choice(a, N, replace=False)))
        else:
            a0 = int(rng.integers(N * 2, N * 20 + 1))
        q, t = model.normalize(gen.gen_2row(gen.SubsetSumData(a0, a, N)))
        orc = verify.oracle_solve(q, origin=model.zero_image(t))
        count += 1
        expect = support.exact_subset_sum(a, a0, N)
        got = orc.optimal and orc.value <= N + 1e-6
        if got != expect:
            failures.append(f"a={a} a0={a0} N={N}: oracle {orc.status} {orc.value}")
        elif got and abs(orc.value - N) > 1e-6:
            failures.append(f"a={a} a0={a0} N={N}: value {orc.value} != N")
    return _record(4, not failures, f"{count} instances, n <= 10" + (f"; {failures[:3]}" if failures else ""))


# -- 5 ---------------------------------------------------------------------------

def criterion_5():
    """Reformulated banded and portfolio instances keep their optima."""
    worst, failures = 0.0, []
    for s in range(12):
        rng = np.random.default_rng(50_000 + s)
        n, k = int(rng.integers(2, 9)), int(rng.integers(0, 3))
        data = support.random_banded(rng, n, k)
        q, t = model.normalize(gen.gen_banded(data))
        orc = verify.oracle_solve(q, origin=model.zero_image(t))
        _, value = model.denormalize_solution(t, orc.x, orc.value, orc.z)
        ref = support.banded_brute(*data.arrays()[:3])
        worst = max(worst, abs(value - ref))
        if abs(value - ref) > 1e-6:
            failures.append(f"banded seed {s}: {value} vs {ref}")
    for s in range(10):
        rng = np.random.default_rng(55_000 + s)
        data = support.random_portfolio(rng, int(rng.integers(2, 7)), int(rng.integers(0, 3)), int(rng.integers(0, 2)))
        q, t = model.normalize(gen.gen_portfolio(data))
        orc = verify.oracle_solve(q, origin=model.zero_image(t))
        _, value = model.denormalize_solution(t, orc.x, orc.value, orc.z)
        ref = support.portfolio_brute(data)
        worst = max(worst, abs(value - ref))
        if abs(value - ref) > 1e-6:
            failures.append(f"portfolio seed {s}: {value} vs {ref}")
    return _record(5, not failures, f"12 banded + 10 portfolio, worst gap {worst:.2e}"
                   + (f"; {failures[:3]}" if failures else ""))


# -- 6 and 7 ----------------------------------------------------------------------------

def _bound_runs():
    """Runs over every instance family with the in-DP assertion disabled,
    so the bounds are measured here independently."""
    for s in range(60):
        rng = np.random.default_rng(60_000 + s)
        eps = EPSILONS[s % 3]
        p = support.random_problem(rng, max_mixed=4 if eps > Fraction(1, 10) else 3)
        yield f"random {s}", p, eps, None
    for s in range(6):
        rng = np.random.default_rng(61_000 + s)
        yield f"banded {s}", gen.gen_banded(support.random_banded(rng, 5, int(rng.integers(0, 3)))), Fraction(1, 4), None
        yield f"portfolio {s}", gen.gen_portfolio(support.random_portfolio(rng, 4, 1, 1)), Fraction(1, 4), None
        yield f"longshort {s}", gen.gen_portfolio_longshort(support.random_portfolio(rng, 3, 1, 1)), Fraction(1, 2), None
    for a, a0 in [((2, 3), 3), ((2, 3, 4), 5), ((2, 4, 6), 5)]:
        yield f"w3 {a} {a0}", gen.gen_subsetsum_w3(gen.SubsetSumData(a0, list(a))), Fraction(1, 2), None
    yield "2row", gen.gen_2row(gen.SubsetSumData(5, [2, 3, 4], 2)), Fraction(1, 4), None


def _measure_bounds():
    cache = getattr(_measure_bounds, "cache", None)
    if cache is None:
        cache = []
        for name, p, eps, td in _bound_runs():
            q, _ = model.normalize(p)
            rbd = graph.decompose(q, td)
            sets = sketch.enumerate_all(q, eps)
            outcome = dp.run_dp(q, rbd, eps, sets, check_bound=False)
            run = support.Run.__new__(support.Run)
            run.q, run.rbd, run.sets, run.outcome, run.eps = q, rbd, sets, outcome, Fraction(eps)
            cache.append((name, run))
        _measure_bounds.cache = cache
    return cache


def criterion_6():
    """Every node table within (2q)^|mixed in bag| * (c+1)^|comb in bag|."""
    bad, nodes = [], 0
    for name, run in _measure_bounds():
        nodes += len(run.outcome.stats)
        bad += [f"{name}: {b}" for b in _bound_failures(run) if b.startswith("node")]
    return _record(6, not bad, f"{nodes} node tables over {len(_measure_bounds())} runs" + (f"; {bad[:3]}" if bad else ""))


def criterion_7():
    """Per-block evaluated sketch keys within 2 (2q)^|incident mixed rows|."""
    bad, blocks = [], 0
    for name, run in _measure_bounds():
        blocks += len(run.sets)
        bad += [f"{name}: {b}" for b in _bound_failures(run) if b.startswith("block")]
    return _record(7, not bad, f"{blocks} sketch sets" + (f"; {bad[:3]}" if bad else ""))


# -- 8 -------------------------------------------------------------------------------

def criterion_8():
    """Barrier solver against a projected-gradient reference."""
    worst_gap = worst_kkt = 0.0
    failures = []
    for s in range(100):
        rng = np.random.default_rng(80_000 + s)
        q = support.random_block_qcqp(rng)
        res = qcqp.solve(q)
        if not res.optimal:
            failures.append(f"seed {s}: {res.status} on a strictly feasible instance")
            continue
        ref, viol, _ = support.pg_reference(q)
        gap = abs(res.value - ref)
        worst_gap = max(worst_gap, gap)
        worst_kkt = max(worst_kkt, res.kkt_residual)
        if gap > 1e-5:
            failures.append(f"seed {s}: value {res.value} vs reference {ref} (viol {viol:.1e})")
        if res.kkt_residual > 1e-6:
            failures.append(f"seed {s}: KKT residual {res.kkt_residual:.2e}")
    return _record(8, not failures, f"100 instances, worst gap {worst_gap:.2e}, worst KKT {worst_kkt:.2e}"
                   + (f"; {failures[:3]}" if failures else ""))


# -- 9 -------------------------------------------------------------------------------

def _generated_instances():
    rng = np.random.default_rng(90_000)
    yield gen.gen_subsetsum_w3(gen.SubsetSumData(5, [2, 3, 4]))
    yield gen.gen_2row(gen.SubsetSumData(9, [2, 3, 4, 7], 2), [1.0, 2.0, 0.5, 1.0])
    for _ in range(4):
        yield gen.gen_banded(support.random_banded(rng, int(rng.integers(2, 9)), int(rng.integers(0, 3))))
        yield gen.gen_portfolio(support.random_portfolio(rng, 5, 2, 2))
        yield gen.gen_portfolio_longshort(support.random_portfolio(rng, 4, 1, 1))
        yield support.random_problem(rng)
    yield gen.gen_truss([[1.0, 1.0, 0.0], [0.0, 1.0, -2.0]], [1.0, 0.5], [[0, 1], [2]], 1,
                        ([-2.0, -1.0, -3.0], [2.0, 4.0, 3.0]))


def criterion_9():
    """Unit 1-norm rows and exact round trips on generated instances."""
    worst_norm = worst_trip = 0.0
    rng = np.random.default_rng(91_000)
    count = 0
    for p in _generated_instances():
        count += 1
        q, t = model.normalize(p)
        for r in q.mixed_ids:
            worst_norm = max(worst_norm, abs(q.constraints[r].form.norm1() - 1.0))
        for _ in range(5):
            z = rng.integers(0, 2, p.n_blocks)
            on = z[[v.block for v in p.variables]] == 1
            x = np.where(on, p.lower + rng.random(p.n) * (p.upper - p.lower), 0.0)
            xn = model.normalize_point(t, x, z)
            back, _ = model.denormalize_solution(t, xn, 0.0, z)
            worst_trip = max(worst_trip, float(np.max(np.abs(back - x), initial=0.0)))
    ok = worst_norm <= 1e-12 and worst_trip <= 1e-12
    return _record(9, ok, f"{count} instances, worst |norm - 1| {worst_norm:.1e}, worst round trip {worst_trip:.1e}")


# -- 10 ------------------------------------------------------------------------------

def criterion_10():
    """Companion decompositions and heuristic validity."""
    notes, failures = [], []
    for n in range(1, 6):
        p = gen.gen_subsetsum_w3(gen.SubsetSumData(3, [2] * n))
        card = p.m - 1
        g = graph.build_intersection_graph(p).without([card])
        td = gen.w3_decomposition(n)
        errs = graph.decomposition_errors(g, td.bags, td.edges, required=range(card))
        if errs or td.width != 2:
            failures.append(f"w3 n={n}: width {td.width}, errors {errs[:2]}")
    notes.append("w3 companion width 2 for n=1..5")
    widths = []
    for n in range(2, 9):
        for k in range(0, 3):
            rng = np.random.default_rng(100 * n + k)
            p = gen.gen_banded(support.random_banded(rng, n, k))
            td = gen.banded_decomposition(p.m, k)
            errs = graph.decomposition_errors(graph.build_intersection_graph(p), td.bags, td.edges)
            if errs:
                failures.append(f"banded n={n} k={k}: invalid {errs[:2]}")
            widths.append((n, k, td.width))
            if td.width > max(k - 1, 0):
                failures.append(f"banded n={n} k={k}: width {td.width} > {max(k - 1, 0)}")
    notes.append("banded companion widths " + " ".join(f"(n{n},k{k}):{w}" for n, k, w in widths if n == 8))
    heur = 0
    for p in itertools.chain(_generated_instances(), (support.random_problem(np.random.default_rng(s))
                                                       for s in range(30))):
        q, _ = model.normalize(p)
        g = graph.build_intersection_graph(q)
        td = graph.min_fill(g)
        errs = graph.decomposition_errors(g, td.bags, td.edges)
        try:
            graph.validate_rooted(q, graph.normalize_decomposition(td, q))
        except graph.InvalidDecomposition as exc:
            errs = errs + [str(exc)]
        heur += 1
        if errs:
            failures.append(f"heuristic on {p.name}: {errs[:2]}")
    notes.append(f"{heur} heuristic decompositions checked")
    return _record(10, not failures, "; ".join(notes) + (f"; failures: {failures[:4]}" if failures else ""))


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, detail = CRITERIA[number]()
    assert ok, detail


if __name__ == "__main__":
    picked = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    results = [CRITERIA[n]()[0] for n in picked]
    sys.exit(0 if all(results) else 1)
