"""Per-block sketches: a discretized budget for each incident mixed constraint.

For a block with incident mixed constraints a sketch is a pair
``(on, levels)``: ``on`` switches the block on or off and ``levels[r]`` is
an integer in ``[-q, q - 1]`` with ``q = ceil(1/eps)``. Its value is the
least block objective subject to the block's share of constraint ``r``
being at most ``eps * (levels[r] + 1)`` (or lying in
``[eps * levels[r], eps * (levels[r] + 1)]`` for linear equalities).

Enumeration walks the full grid but avoids most solves: constraints whose
level is at or above the block's largest possible contribution are
dropped, levels below the smallest contribution are infeasible outright,
solves are cached by the effective constraint set, and a key inherits the
optimum of the key one level up whenever that optimizer already fits.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import qcqp
from .model import EQ, Problem

log = logging.getLogger(__name__)

_VERTEX_LIMIT = 12


def levels(eps: Fraction) -> int:
    """``ceil(1/eps)``."""
    return math.ceil(1 / Fraction(eps))


def as_fraction(eps) -> Fraction:
    e = Fraction(eps).limit_denominator(10**9) if isinstance(eps, float) else Fraction(eps)
    if not 0 < e < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {eps}")
    return e


@dataclass(frozen=True)
class Sketch:
    block: int
    on: int
    levels: tuple[int, ...]
    value: float
    certificate: np.ndarray = field(repr=False)

    @property
    def key(self) -> tuple[int, tuple[int, ...]]:
        return self.on, self.levels


@dataclass
class SketchSet:
    block: int
    constraints: tuple[int, ...]
    sketches: list[Sketch]
    evaluated: int = 0
    solves: int = 0

    def __len__(self) -> int:
        return len(self.sketches)

    def __iter__(self):
        return iter(self.sketches)

    def lookup(self, on: int, levels: Sequence[int]) -> Sketch | None:
        return self._index.get((on, tuple(levels)))

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s.key: s for s in self.sketches}
            self.__dict__["_idx"] = idx
        return idx

    def dump(self) -> str:
        return "".join(f"{self.block} {s.on} {' '.join(map(str, s.levels))} {s.value:.12g}\n"
                       for s in self.sketches)


# -- building block problems -------------------------------------------------

class _BlockData:
    """Block restriction of the objective and of each incident mixed row."""

    def __init__(self, p: Problem, i: int):
        self.i = i
        idx = list(p.blocks[i].variables)
        self.idx = idx
        self.dim = len(idx)
        self.rows = p.block_mixed(i)
        obj = p.objective
        self.obj = (obj.quad.get(i), obj.diag[idx].copy(), obj.linear[idx].copy(),
                    float(obj.indicator[i]))
        self.forms = []
        for r in self.rows:
            f = p.constraints[r].form
            self.forms.append((f.quad.get(i), f.diag[idx].copy(), f.linear[idx].copy(),
                               float(f.indicator[i]), p.constraints[r].sense == EQ))
        self._ranges = None

    def ranges(self) -> list[tuple[float, float]]:
        """Smallest and largest block contribution (without the indicator
        term) of each row over the unit box."""
        if self._ranges is None:
            self._ranges = [_lhs_range(Q, d, c, self.dim) for Q, d, c, _, _ in self.forms]
        return self._ranges

    def problem(self, active: Sequence[tuple[int, float, float]]) -> qcqp.BlockQcqp:
        """``active``: (row position, lower, upper) of the block LHS, either
        bound possibly infinite."""
        Q0, d0, c0, v0 = self.obj
        cons, rows = [], []
        for pos, lo, hi in active:
            Q, d, c, _, eq = self.forms[pos]
            if eq:
                rows.append(qcqp.LinearRow(c, lo, hi))
            else:
                cons.append(qcqp.QcqpConstraint(c, hi, Q, d))
        return qcqp.BlockQcqp(c0, Q0, d0, v0, cons, rows, np.zeros(self.dim), np.ones(self.dim))

    def bounds(self, k: Sequence[int], eps: Fraction) -> list[tuple[float, float]]:
        out = []
        for (Q, d, c, v, eq), kr in zip(self.forms, k):
            hi = float(eps * (kr + 1)) - v
            lo = float(eps * kr) - v if eq else -math.inf
            out.append((lo, hi))
        return out

    def satisfies(self, x, bounds, tol: float) -> bool:
        for (Q, d, c, _, eq), (lo, hi) in zip(self.forms, bounds):
            val = float(d @ (x * x) + c @ x)
            if Q is not None:
                val += float(x @ Q @ x)
            if val > hi + tol or val < lo - tol:
                return False
        return True


def _lhs_range(Q, d, c, dim: int) -> tuple[float, float]:
    if dim == 0:
        return 0.0, 0.0
    if Q is None and not np.any(d):
        return float(np.minimum(c, 0).sum()), float(np.maximum(c, 0).sum())
    res = qcqp.solve(qcqp.BlockQcqp(c, Q, d, 0.0, (), (), np.zeros(dim), np.ones(dim)))
    lo = res.value
    if dim <= _VERTEX_LIMIT:
        V = np.array(list(itertools.product((0.0, 1.0), repeat=dim)))
        vals = V @ c + (V * V) @ d
        if Q is not None:
            vals = vals + np.einsum("ij,jk,ik->i", V, Q, V)
        hi = float(vals.max())
    else:
        hi = float(np.abs(Q).sum() if Q is not None else 0.0) + float(d.sum()) + float(np.maximum(c, 0).sum())
    return lo, hi


def sketch_value(p: Problem, i: int, on: int, k: Sequence[int], eps,
                 feas_tol: float = qcqp.FEAS_TOL) -> qcqp.QcqpResult:
    """Optimal block objective for sketch ``(on, k)``."""
    eps = as_fraction(eps)
    data = _BlockData(p, i)
    k = tuple(int(v) for v in k)
    if len(k) != len(data.rows):
        raise ValueError(f"block {i} has {len(data.rows)} mixed rows, got key of length {len(k)}")
    if not on:
        x = np.zeros(data.dim)
        bnds = data.bounds(k, eps)
        # indicator terms vanish when the block is off
        viol = max([0.0] + [max(lo + v, -(hi + v)) for (lo, hi), (*_, v, _e) in zip(bnds, data.forms)])
        if viol > feas_tol:
            return qcqp.QcqpResult("infeasible", x, math.inf, max_violation=viol)
        return qcqp.QcqpResult("optimal", x, 0.0, 0.0, 0.0)
    active = [(pos, lo, hi) for pos, (lo, hi) in enumerate(data.bounds(k, eps))]
    return qcqp.solve(data.problem(active), feas_tol)


def enumerate_sketches(p: Problem, i: int, eps, feas_tol: float = qcqp.FEAS_TOL) -> SketchSet:
    """All feasible sketches of block ``i``; the off sketch appears once,
    with every level 0."""
    eps = as_fraction(eps)
    q = levels(eps)
    data = _BlockData(p, i)
    nr = len(data.rows)
    zero = np.zeros(data.dim)
    out = [Sketch(i, 0, (0,) * nr, 0.0, zero)]
    ranges = data.ranges()
    le_rows = [pos for pos in range(nr) if not data.forms[pos][4]]
    cache: dict[tuple, qcqp.QcqpResult | None] = {}
    results: dict[tuple[int, ...], qcqp.QcqpResult | None] = {}
    evaluated = 1
    solves = 0
    for k in itertools.product(range(q - 1, -q - 1, -1), repeat=nr):
        evaluated += 1
        bnds = data.bounds(k, eps)
        res = _shortcut(data, k, bnds, results, le_rows, q, feas_tol)
        if res is _MISS:
            active, dead = [], False
            for pos, ((lo, hi), (rmin, rmax)) in enumerate(zip(bnds, ranges)):
                if hi < rmin - feas_tol or lo > rmax + feas_tol:
                    dead = True
                    break
                lo_eff = lo if lo > rmin else -math.inf
                hi_eff = hi if hi < rmax else math.inf
                if math.isfinite(lo_eff) or math.isfinite(hi_eff):
                    active.append((pos, lo_eff, hi_eff))
            if dead:
                res = None
            else:
                sig = tuple(active)
                if sig in cache:
                    res = cache[sig]
                else:
                    solves += 1
                    try:
                        r = qcqp.solve(data.problem(active), feas_tol)
                    except qcqp.NumericalFailure as exc:
                        log.warning("block %d key %s: %s; treated as infeasible", i, k, exc)
                        r = None
                    res = r if r is not None and r.optimal else None
                    cache[sig] = res
        results[k] = res
        if res is not None:
            out.append(Sketch(i, 1, k, float(res.value), np.asarray(res.x, float)))
    # ascending key order
    out.sort(key=lambda s: s.key)
    return SketchSet(i, data.rows, out, evaluated, solves)


_MISS = object()


def _shortcut(data: _BlockData, k, bnds, results, le_rows, q, feas_tol):
    """Reuse the key one level up in some ``<=`` row: infeasible there means
    infeasible here; an optimizer that fits here is optimal here too."""
    for pos in le_rows:
        if k[pos] == q - 1:
            continue
        up = list(k)
        up[pos] += 1
        prev = results.get(tuple(up), _MISS)
        if prev is _MISS:
            continue
        if prev is None:
            return None
        if data.satisfies(prev.x, bnds, feas_tol):
            return prev
    return _MISS


def _enumerate_job(args):
    p, i, eps, feas_tol = args
    return enumerate_sketches(p, i, eps, feas_tol)


def enumerate_all(p: Problem, eps, threads: int = 1, feas_tol: float = qcqp.FEAS_TOL) -> list[SketchSet]:
    """Sketch sets of every block, optionally in worker processes."""
    eps = as_fraction(eps)
    jobs = [(p, i, eps, feas_tol) for i in range(p.n_blocks)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_enumerate_job, jobs))
    return [_enumerate_job(j) for j in jobs]


def sketch_bound(eps, n_rows: int) -> int:
    """Upper bound on keys evaluated for a block with ``n_rows`` mixed rows."""
    return 2 * (2 * levels(as_fraction(eps))) ** n_rows
