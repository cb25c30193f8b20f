"""Dynamic program over a rooted binary decomposition.

A state at node ``t`` assigns an integer to every constraint in the bag:
for a mixed row the summed sketch levels of the blocks below ``t``, for a
combinatorial row the signed count ``sum v_i z_i`` of those blocks.
Each table maps states to the least total sketch value reaching them.

Level sums of ``<=`` rows saturate at ``-q`` from below (a lower sum only
makes the final check easier, and the saturated value still never exceeds
the true block contributions) and sums above ``q - 1`` are dropped: with
unit-norm rows and minimal levels no optimal ensemble reaches them.
Equality rows need both sides, so their sums are never saturated; the
lower end of their range grows with the number of incident blocks below.

Tables are kept as numpy arrays sorted by key, so ties between equal
values always resolve to the lexicographically smallest predecessor.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .graph import RootedBinaryDecomposition
from .model import EQ, Problem
from .sketch import SketchSet, as_fraction, levels

log = logging.getLogger(__name__)

CONS_TOL = 1e-9
_CHUNK = 1 << 20

LEAF, LIFT, MERGE = "leaf", "lift", "merge"


class CorruptTable(RuntimeError):
    pass


@dataclass
class StateTable:
    """Rows sorted by key. ``back`` holds, per row, the sketch index (leaf),
    the child row (lift) or both child rows (merge)."""

    node: int
    coords: tuple[int, ...]
    keys: np.ndarray
    values: np.ndarray
    back: np.ndarray
    kind: str = LEAF
    lo: np.ndarray = field(default=None, repr=False)
    hi: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.values)

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in k): float(x) for k, x in zip(self.keys, self.values)}

    def lookup(self, key: Sequence[int]) -> int | None:
        hit = np.flatnonzero(np.all(self.keys == np.asarray(key, dtype=np.int64), axis=1))
        return int(hit[0]) if len(hit) else None


@dataclass
class NodeStat:
    node: int
    size: int
    bound: float
    n_mixed: int
    n_combinatorial: int
    best: float


@dataclass
class DpOutcome:
    status: str
    value: float
    root_row: int | None
    tables: dict[int, StateTable]
    stats: list[NodeStat]
    eps: Fraction

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def trace(self) -> str:
        return "".join(f"node {s.node}: states {s.size} bound {s.bound:.6g} "
                       f"mixed {s.n_mixed} combinatorial {s.n_combinatorial} min {s.best:.12g}\n"
                       for s in self.stats)


@dataclass
class Certificate:
    x: np.ndarray
    z: np.ndarray
    value: float
    sketches: dict[int, tuple[int, tuple[int, ...]]]
    report: object = None


# -- per-node context ----------------------------------------------------------

class _Context:
    def __init__(self, p: Problem, rbd: RootedBinaryDecomposition, eps: Fraction):
        self.p = p
        self.rbd = rbd
        self.eps = eps
        self.q = levels(eps)
        self.eq = {r for r in p.mixed_ids if p.constraints[r].sense == EQ}
        self.comb_support = p.comb_support

    def coords(self, t: int) -> tuple[int, ...]:
        return self.rbd.bag_mixed(t) + self.rbd.bag_combinatorial(t)

    def ranges(self, t: int, coords) -> tuple[np.ndarray, np.ndarray]:
        under = self.rbd.blocks_below[t]
        lo, hi = [], []
        for r in coords:
            below = self.p.incidence[r] & under
            if r in self.rbd.mixed:
                hi.append(self.q - 1)
                lo.append(-self.q - (len(below) if r in self.eq else 0))
            else:
                v = self.p.constraints[r].form.indicator
                lo.append(-sum(1 for i in below if v[i] < 0))
                hi.append(sum(1 for i in below if v[i] > 0))
        return np.array(lo, dtype=np.int64), np.array(hi, dtype=np.int64)

    def bound(self, t: int) -> float:
        nm = len(self.rbd.bag_mixed(t))
        nc = len(self.rbd.bag_combinatorial(t))
        return float((2 * self.q) ** nm) * float((self.comb_support + 1) ** nc)


def _encode(keys: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Mixed-radix code, most significant coordinate first (sorting codes
    sorts keys lexicographically)."""
    code = np.zeros(len(keys), dtype=np.int64)
    for d in range(keys.shape[1]):
        code = code * int(hi[d] - lo[d] + 1) + (keys[:, d] - lo[d])
    return code


def _group_min(keys, values, back, lo, hi):
    """One row per distinct key: least value, then smallest ``back``."""
    if len(values) == 0:
        return keys, values, back
    tie = tuple(back[:, j] for j in range(back.shape[1] - 1, -1, -1)) + (values,)
    span = float(np.prod((hi - lo + 1).astype(float)))
    if span < 2.0 ** 62:
        code = _encode(keys, lo, hi)
        order = np.lexsort(tie + (code,))
        code = code[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = code[1:] != code[:-1]
    else:
        cols = tuple(keys[:, d] for d in range(keys.shape[1] - 1, -1, -1))
        order = np.lexsort(tie + cols)
        sk = keys[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    sel = order[first]
    return keys[sel], values[sel], back[sel]


def _apply_ranges(keys: np.ndarray, lo, hi, saturate: np.ndarray) -> np.ndarray:
    """Saturate flagged coordinates at ``lo``; mask of rows inside the range."""
    if keys.shape[1] == 0:
        return np.ones(len(keys), dtype=bool)
    np.maximum(keys, np.where(saturate, lo, np.iinfo(np.int64).min), out=keys)
    return np.all((keys >= lo) & (keys <= hi), axis=1)


def _saturating(ctx: _Context, coords) -> np.ndarray:
    return np.array([r in ctx.rbd.mixed and r not in ctx.eq for r in coords], dtype=bool)


# -- operations ---------------------------------------------------------------

def init_leaf(ctx: _Context, t: int, sketches: SketchSet) -> StateTable:
    """States of a designated leaf: one per sketch, duplicates keep the
    least value."""
    i = ctx.rbd.leaf_block[t]
    coords = ctx.coords(t)
    pos = {r: j for j, r in enumerate(sketches.constraints)}
    v = {r: ctx.p.constraints[r].form.indicator[i] for r in coords}
    rows = []
    for s in sketches:
        key = []
        for r in coords:
            if r in ctx.rbd.mixed:
                key.append(s.levels[pos[r]] if r in pos else 0)
            else:
                key.append(int(round(v[r])) * s.on)
        rows.append(key)
    keys = np.array(rows, dtype=np.int64).reshape(len(rows), len(coords))
    values = np.array([s.value for s in sketches], dtype=float)
    back = np.arange(len(values), dtype=np.int64).reshape(-1, 1)
    lo, hi = ctx.ranges(t, coords)
    keep = _apply_ranges(keys, lo, hi, _saturating(ctx, coords))
    keys, values, back = _group_min(keys[keep], values[keep], back[keep], lo, hi)
    return StateTable(t, coords, keys, values, back, LEAF, lo, hi)


def filter_consistent(ctx: _Context, table: StateTable, finalized) -> StateTable:
    """Drop states violating a constraint whose incident blocks all lie
    below this node."""
    keep = np.ones(len(table), dtype=bool)
    col = {r: j for j, r in enumerate(table.coords)}
    for r in sorted(finalized):
        con = ctx.p.constraints[r]
        kh = table.keys[:, col[r]] if r in col else np.zeros(len(table), dtype=np.int64)
        if con.is_combinatorial:
            keep &= kh <= con.rhs
            continue
        keep &= float(ctx.eps) * kh <= con.rhs + CONS_TOL
        if con.sense == EQ:
            nb = len(ctx.p.incidence[r])
            keep &= float(ctx.eps) * (kh + nb) >= con.rhs - CONS_TOL
    if keep.all():
        return table
    return StateTable(table.node, table.coords, table.keys[keep], table.values[keep],
                      table.back[keep], table.kind, table.lo, table.hi)


def _project(ctx: _Context, t: int, src: StateTable, coords) -> np.ndarray:
    col = {r: j for j, r in enumerate(src.coords)}
    out = np.zeros((len(src), len(coords)), dtype=np.int64)
    for j, r in enumerate(coords):
        if r in col:
            out[:, j] = src.keys[:, col[r]]
    return out


def lift_one_child(ctx: _Context, t: int, child: StateTable) -> StateTable:
    """Project the child's states onto this node's bag, least value per
    projected state."""
    coords = ctx.coords(t)
    lo, hi = ctx.ranges(t, coords)
    keys = _project(ctx, t, child, coords)
    back = np.arange(len(child), dtype=np.int64).reshape(-1, 1)
    keys, values, back = _group_min(keys, child.values.copy(), back, lo, hi)
    return StateTable(t, coords, keys, values, back, LIFT, lo, hi)


def merge_two_children(ctx: _Context, t: int, left: StateTable, right: StateTable) -> StateTable:
    """Every compatible pair of child states, level sums added."""
    coords = ctx.coords(t)
    lo, hi = ctx.ranges(t, coords)
    sat = _saturating(ctx, coords)
    a = _project(ctx, t, left, coords)
    b = _project(ctx, t, right, coords)
    nb = len(right)
    acc_k = np.zeros((0, len(coords)), dtype=np.int64)
    acc_v = np.zeros(0)
    acc_b = np.zeros((0, 2), dtype=np.int64)
    if len(left) == 0 or nb == 0:
        return StateTable(t, coords, acc_k, acc_v, acc_b, MERGE, lo, hi)
    step = max(1, _CHUNK // nb)
    for start in range(0, len(left), step):
        stop = min(start + step, len(left))
        ia = np.repeat(np.arange(start, stop, dtype=np.int64), nb)
        ib = np.tile(np.arange(nb, dtype=np.int64), stop - start)
        keys = a[ia] + b[ib]
        ok = _apply_ranges(keys, lo, hi, sat)
        if not ok.any():
            continue
        vals = left.values[ia[ok]] + right.values[ib[ok]]
        back = np.stack([ia[ok], ib[ok]], axis=1)
        acc_k, acc_v, acc_b = _group_min(np.concatenate([acc_k, keys[ok]]), np.concatenate([acc_v, vals]),
                                         np.concatenate([acc_b, back]), lo, hi)
    return StateTable(t, coords, acc_k, acc_v, acc_b, MERGE, lo, hi)


def run_dp(p: Problem, rbd: RootedBinaryDecomposition, eps, sketch_sets: Sequence[SketchSet],
           check_bound: bool = True) -> DpOutcome:
    """Post-order pass; the root's least state value is the answer."""
    eps = as_fraction(eps)
    ctx = _Context(p, rbd, eps)
    tables: dict[int, StateTable] = {}
    stats: list[NodeStat] = []
    for t in rbd.postorder:
        ch = rbd.children[t]
        if not ch:
            if t not in rbd.leaf_block:
                raise CorruptTable(f"leaf {t} is not designated")
            table = init_leaf(ctx, t, sketch_sets[rbd.leaf_block[t]])
        elif len(ch) == 1:
            table = lift_one_child(ctx, t, tables[ch[0]])
        else:
            table = merge_two_children(ctx, t, tables[ch[0]], tables[ch[1]])
        table = filter_consistent(ctx, table, rbd.finalized[t])
        tables[t] = table
        bound = ctx.bound(t)
        best = float(table.values.min()) if len(table) else math.inf
        stats.append(NodeStat(t, len(table), bound, len(rbd.bag_mixed(t)),
                              len(rbd.bag_combinatorial(t)), best))
        log.debug("node %d: %d states (bound %g)", t, len(table), bound)
        if check_bound and len(table) > bound:
            raise AssertionError(f"node {t}: {len(table)} states exceed bound {bound}")
    root = tables[rbd.root]
    if len(root) == 0:
        return DpOutcome("infeasible", math.inf, None, tables, stats, eps)
    row = int(np.argmin(root.values))
    return DpOutcome("feasible", float(root.values[row]), row, tables, stats, eps)


def extract_certificate(p: Problem, rbd: RootedBinaryDecomposition, outcome: DpOutcome,
                        sketch_sets: Sequence[SketchSet]) -> Certificate:
    """Follow back-pointers from the root state to one sketch per block."""
    if not outcome.feasible:
        raise ValueError("no certificate for an infeasible outcome")
    x = np.zeros(p.n)
    z = np.zeros(p.n_blocks, dtype=int)
    chosen: dict[int, tuple[int, tuple[int, ...]]] = {}
    total = 0.0
    stack = [(rbd.root, outcome.root_row)]
    while stack:
        t, row = stack.pop()
        table = outcome.tables.get(t)
        if table is None or row is None or not 0 <= row < len(table):
            raise CorruptTable(f"dangling back-pointer at node {t}, row {row}")
        ch = rbd.children[t]
        if table.kind == LEAF:
            i = rbd.leaf_block[t]
            idx = int(table.back[row, 0])
            sketches = sketch_sets[i].sketches
            if not 0 <= idx < len(sketches):
                raise CorruptTable(f"leaf {t} points at missing sketch {idx}")
            s = sketches[idx]
            x[list(p.blocks[i].variables)] = s.certificate
            z[i] = s.on
            chosen[i] = s.key
            total += s.value
        elif table.kind == LIFT:
            stack.append((ch[0], int(table.back[row, 0])))
        else:
            stack.append((ch[0], int(table.back[row, 0])))
            stack.append((ch[1], int(table.back[row, 1])))
    if len(chosen) != p.n_blocks:
        raise CorruptTable("back-pointer walk missed some blocks")
    return Certificate(x, z, total, dict(sorted(chosen.items())))
