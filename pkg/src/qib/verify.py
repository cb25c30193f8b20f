"""Solution checks and an exhaustive oracle over indicator patterns."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import qcqp
from .model import EQ, LE, Problem

INDICATOR_TOL = 1e-9
BOUND_TOL = 1e-9
MAX_ORACLE_BLOCKS = 20
_PROP_TOL = 1e-7
# a variable bounded this far from zero forces its block on
_FORCE_TOL = 1e-6
_ORIGIN_TOL = 1e-12


class IndicatorViolation(ValueError):
    pass


class TooLarge(ValueError):
    pass


@dataclass
class CheckReport:
    objective: float
    max_mixed_violation: float
    slacks: list[float]
    combinatorial_ok: bool
    theorem_bound: float
    within_bound: bool
    bound_violation: float = 0.0

    def to_dict(self) -> dict:
        return {"objective": self.objective, "max_mixed_violation": self.max_mixed_violation,
                "slacks": list(self.slacks), "combinatorial_ok": self.combinatorial_ok,
                "theorem_bound": self.theorem_bound, "within_bound": self.within_bound,
                "bound_violation": self.bound_violation}


def theorem_bound(p: Problem, eps) -> float:
    """``max_r |incidence(r)| * eps`` over mixed rows."""
    if eps is None:
        return 0.0
    return max((len(p.incidence[r]) for r in p.mixed_ids), default=0) * float(Fraction(eps))


def check_solution(p: Problem, x, z, eps=None, feas_tol: float = qcqp.FEAS_TOL) -> CheckReport:
    """Objective, slacks and violations of ``(x, z)``.

    Slacks are ``rhs - lhs`` (for equalities ``-|lhs - rhs|``).
    Combinatorial rows are checked in integer arithmetic.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z)
    if x.shape != (p.n,) or z.shape != (p.n_blocks,):
        raise ValueError(f"expected x of length {p.n} and z of length {p.n_blocks}")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("z must be binary")
    zi = z.astype(int)
    for b in p.blocks:
        if zi[b.id] == 0 and b.variables and np.max(np.abs(x[list(b.variables)])) > INDICATOR_TOL:
            raise IndicatorViolation(f"block {b.id} is off but has nonzero variables")
    on = zi[[v.block for v in p.variables]] == 1 if p.n else np.zeros(0, dtype=bool)
    lo = np.where(on, p.lower, np.minimum(p.lower, 0.0))
    hi = np.where(on, p.upper, np.maximum(p.upper, 0.0))
    bound_violation = float(max(np.max(lo - x, initial=0.0), np.max(x - hi, initial=0.0)))
    # an off block whose bounds exclude zero cannot be off
    off_bad = any(zi[v.block] == 0 and not v.lower <= 0.0 <= v.upper for v in p.variables)
    slacks = []
    worst = 0.0
    comb_ok = not off_bad
    for r, c in enumerate(p.constraints):
        if c.is_combinatorial:
            lhs = int(sum(int(round(v)) * int(zz) for v, zz in zip(c.form.indicator, zi)))
            slacks.append(float(int(c.rhs) - lhs))
            comb_ok &= lhs <= int(c.rhs)
            continue
        lhs = c.form.evaluate(p.blocks, x, zi)
        if c.sense == EQ:
            viol = abs(lhs - c.rhs)
            slacks.append(-viol)
        else:
            viol = max(lhs - c.rhs, 0.0)
            slacks.append(c.rhs - lhs)
        worst = max(worst, viol)
    bound = theorem_bound(p, eps)
    within = worst <= bound + feas_tol and comb_ok and bound_violation <= BOUND_TOL
    return CheckReport(p.objective_value(x, zi), worst, slacks, bool(comb_ok), bound, bool(within),
                       bound_violation)


# -- oracle ------------------------------------------------------------------

@dataclass
class OracleResult:
    status: str
    value: float
    x: np.ndarray | None
    z: np.ndarray | None
    count: int = 0
    nodes: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _range_over_box(Q, d, c, lo, hi) -> tuple[float, float]:
    """Least and largest value of ``x'Qx + d'x^2 + c'x`` over a box."""
    dim = len(c)
    if dim == 0:
        return 0.0, 0.0
    if Q is None and not np.any(d):
        return (float(np.minimum(c * lo, c * hi).sum()), float(np.maximum(c * lo, c * hi).sum()))
    res = qcqp.solve(qcqp.BlockQcqp(c, Q, d, 0.0, (), (), lo, hi))
    if dim <= 12:
        V = np.array(list(itertools.product((0, 1), repeat=dim)), dtype=float)
        P = lo + V * (hi - lo)
        vals = P @ c + (P * P) @ d
        if Q is not None:
            vals = vals + np.einsum("ij,jk,ik->i", P, Q, P)
        top = float(vals.max())
    else:
        m = np.maximum(np.abs(lo), np.abs(hi))
        top = float(m @ (np.abs(Q) if Q is not None else np.zeros((dim, dim))) @ m + d @ (m * m) + np.abs(c) @ m)
    return float(res.value), top


class _Oracle:
    def __init__(self, p: Problem, feas_tol: float, origin=None):
        self.p = p
        self.feas_tol = feas_tol
        nb = p.n_blocks
        self.idx = [list(b.variables) for b in p.blocks]
        self.origin = np.zeros(p.n) if origin is None else np.asarray(origin, dtype=float)
        self.zero_ok = [all(p.lower[j] <= 0.0 <= p.upper[j] for j in ix) for ix in self.idx]
        # on-state ranges of every mixed row and of the objective, per block
        self.mixed = list(p.mixed_ids)
        self.comb = list(p.combinatorial_ids)
        self.rng = np.zeros((len(self.mixed), nb, 2))
        for a, r in enumerate(self.mixed):
            f = p.constraints[r].form
            for i in range(nb):
                if i not in p.incidence[r]:
                    continue
                ix = self.idx[i]
                lo, hi = _range_over_box(f.quad.get(i), f.diag[ix], f.linear[ix], p.lower[ix], p.upper[ix])
                self.rng[a, i] = (lo + f.indicator[i], hi + f.indicator[i])
        self.obj_min = np.zeros(nb)
        f = p.objective
        for i in range(nb):
            ix = self.idx[i]
            lo, _ = _range_over_box(f.quad.get(i), f.diag[ix], f.linear[ix], p.lower[ix], p.upper[ix]) \
                if ix else (0.0, 0.0)
            self.obj_min[i] = lo + f.indicator[i]
        self.comb_v = np.array([p.constraints[r].form.indicator for r in self.comb]).reshape(len(self.comb), nb)
        self.comb_rhs = np.array([p.constraints[r].rhs for r in self.comb])
        # linear rows for bound propagation: (coef over x, coef over z, is_eq, rhs)
        # linear rows as sparse (sign * coefficient, sign * rhs) over x then z
        self.lin = []
        n = p.n
        for r in self.mixed:
            c = p.constraints[r]
            if not c.form.is_linear():
                continue
            coef = np.concatenate([c.form.linear, c.form.indicator])
            nz = [int(j) for j in np.flatnonzero(coef)]
            for sign in ((1.0, -1.0) if c.sense == EQ else (1.0,)):
                self.lin.append((nz, [sign * float(coef[j]) for j in nz], sign * float(c.rhs)))
        self.var_block = [v.block for v in p.variables]
        self.n_var = n
        self.forced_on = [self._dominant(i) for i in range(nb)]

    def _dominant(self, i: int) -> bool:
        """Switching block ``i`` on at its origin point is never worse than
        switching it off."""
        p = self.p
        b = p.blocks[i]
        x0 = self.origin[self.idx[i]]
        if not np.all((p.lower[self.idx[i]] <= x0) & (x0 <= p.upper[self.idx[i]])):
            return False
        if any(p.constraints[r].form.indicator[i] > 0 for r in self.comb):
            return False

        def shift(form):
            return form.block_value(b, x0, 1.0), _ORIGIN_TOL * (1.0 + form.block_weight(b))

        val, tol = shift(p.objective)
        if val > tol:
            return False
        for r in self.mixed:
            if i not in p.incidence[r]:
                continue
            val, tol = shift(p.constraints[r].form)
            if val > tol or (p.constraints[r].sense == EQ and val < -tol):
                return False
        return True

    # pruning ---------------------------------------------------------------

    def _prune(self, z: list[int], depth: int) -> bool:
        nb = self.p.n_blocks
        for k in range(depth):
            if z[k] == 0 and not self.zero_ok[k]:
                return True
        forced = np.zeros(nb, dtype=bool)
        if self.lin:
            bounds = self._propagate(z, depth)
            if bounds is None:
                return True
            lo, hi = bounds
            for j, b in enumerate(self.var_block):
                if b >= depth and (lo[j] > _FORCE_TOL or hi[j] < -_FORCE_TOL):
                    forced[b] = True
        dec = np.array(z[:depth], dtype=float)
        if len(self.comb):
            rest = self.comb_v[:, depth:]
            partial = (self.comb_v[:, :depth] @ dec + rest[:, forced[depth:]].sum(axis=1)
                       + np.minimum(rest[:, ~forced[depth:]], 0).sum(axis=1))
            if np.any(partial > self.comb_rhs):
                return True
        if self.mixed:
            on = dec == 1
            lo = self.rng[:, :depth, 0][:, on].sum(axis=1) + np.minimum(self.rng[:, depth:, 0], 0).sum(axis=1)
            hi = self.rng[:, :depth, 1][:, on].sum(axis=1) + np.maximum(self.rng[:, depth:, 1], 0).sum(axis=1)
            for a, r in enumerate(self.mixed):
                c = self.p.constraints[r]
                if lo[a] > c.rhs + self.feas_tol:
                    return True
                if c.sense == EQ and hi[a] < c.rhs - self.feas_tol:
                    return True
        return False

    def _propagate(self, z: list[int], depth: int):
        """Interval tightening over the linear rows with ``z`` relaxed to
        ``[0, 1]`` past ``depth``; None when some domain empties."""
        p = self.p
        n = self.n_var
        lo, hi = [], []
        for j, b in enumerate(self.var_block):
            if b < depth and z[b] == 0:
                lo.append(0.0)
                hi.append(0.0)
            elif b < depth:
                lo.append(float(p.lower[j]))
                hi.append(float(p.upper[j]))
            else:
                lo.append(min(float(p.lower[j]), 0.0))
                hi.append(max(float(p.upper[j]), 0.0))
        for k in range(p.n_blocks):
            v = float(z[k]) if k < depth else None
            lo.append(0.0 if v is None else v)
            hi.append(1.0 if v is None else v)
        for _ in range(50):
            changed = False
            for nz, coef, b in self.lin:
                mins = [a * lo[j] if a > 0 else a * hi[j] for j, a in zip(nz, coef)]
                total = sum(mins)
                if total > b + _PROP_TOL * (1 + abs(b)):
                    return None
                for t, (j, a) in enumerate(zip(nz, coef)):
                    lim = (b - (total - mins[t])) / a
                    if a > 0:
                        if lim < hi[j] - 1e-12 * (1 + abs(lim)):
                            if lim < lo[j] - _PROP_TOL * (1 + abs(lim)):
                                return None
                            hi[j] = max(lim, lo[j])
                            changed = True
                    elif lim > lo[j] + 1e-12 * (1 + abs(lim)):
                        if lim > hi[j] + _PROP_TOL * (1 + abs(lim)):
                            return None
                        lo[j] = min(lim, hi[j])
                        changed = True
                    else:
                        continue
                    mins[t] = a * lo[j] if a > 0 else a * hi[j]
                    total = sum(mins)
            if not changed:
                break
        return lo[:n], hi[:n]

    # leaf solve ------------------------------------------------------------

    def _components(self, on: list[int]) -> list[list[int]]:
        """Switched-on blocks grouped by shared mixed rows."""
        parent = {i: i for i in on}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for r in self.mixed:
            touched = [i for i in self.p.incidence[r] if i in parent]
            for i in touched[1:]:
                parent[find(i)] = find(touched[0])
        groups: dict[int, list[int]] = {}
        for i in on:
            groups.setdefault(find(i), []).append(i)
        return list(groups.values())

    def _solve(self, z: list[int]) -> tuple[float, np.ndarray] | None:
        p = self.p
        on = [i for i in range(p.n_blocks) if z[i]]
        x = np.zeros(p.n)
        total = 0.0
        # rows touching no switched-on block reduce to constants
        for r in self.mixed:
            con = p.constraints[r]
            if not any(z[i] for i in p.incidence[r]):
                if con.rhs < -self.feas_tol or con.sense == EQ and con.rhs > self.feas_tol:
                    return None
        for group in self._components(on):
            sol = self._solve_group(group, z)
            if sol is None:
                return None
            total += sol[0]
            x[sol[2]] = sol[1]
        return total, x

    def _solve_group(self, group: list[int], z: list[int]):
        p = self.p
        cols = [j for i in group for j in self.idx[i]]
        pos = {j: k for k, j in enumerate(cols)}
        dim = len(cols)
        members = set(group)

        def restrict(form):
            Q = np.zeros((dim, dim))
            for i in group:
                if i in form.quad:
                    ix = [pos[j] for j in self.idx[i]]
                    Q[np.ix_(ix, ix)] += form.quad[i]
            return (Q if np.any(Q) else None), form.diag[cols], form.linear[cols]

        Q0, d0, c0 = restrict(p.objective)
        k0 = float(sum(p.objective.indicator[i] for i in group))
        cons = []
        for r in self.mixed:
            if not members & p.incidence[r]:
                continue
            con = p.constraints[r]
            Q, d, c = restrict(con.form)
            # indicator terms of every switched-on block touching the row
            k = float(sum(con.form.indicator[i] for i in p.incidence[r] if z[i]))
            cons.append(qcqp.QcqpConstraint(c, con.rhs - k, Q, d, EQ if con.sense == EQ else LE))
        q = qcqp.BlockQcqp(c0, Q0, d0, k0, cons, (), p.lower[cols], p.upper[cols])
        res = qcqp.solve(q, self.feas_tol)
        if not res.optimal:
            return None
        return float(res.value), res.x, cols

    def run(self) -> OracleResult:
        p = self.p
        nb = p.n_blocks
        best = math.inf
        best_x = best_z = None
        count = nodes = 0
        floor = float(np.minimum(self.obj_min, 0).sum())
        z = [0] * nb
        stack = [(0, None)]
        # depth-first, 0 before 1, so ties keep the lexicographically first pattern
        while stack:
            depth, val = stack.pop()
            if val is not None:
                z[depth - 1] = val
            nodes += 1
            if depth and self._prune(z, depth):
                continue
            lb = float(sum(self.obj_min[k] for k in range(depth) if z[k])
                       + np.minimum(self.obj_min[depth:], 0).sum())
            if lb >= best - 1e-9:
                continue
            if depth == nb:
                count += 1
                sol = self._solve(z)
                if sol is not None and sol[0] < best - 1e-9:
                    best, best_x, best_z = sol[0], sol[1], np.array(z, dtype=int)
                    if best <= floor + 1e-12:
                        break
                continue
            choices = (1,) if self.forced_on[depth] else (0, 1)
            for v in reversed(choices):
                stack.append((depth + 1, v))
        if best_x is None:
            return OracleResult("infeasible", math.inf, None, None, count, nodes)
        return OracleResult("optimal", best, best_x, best_z, count, nodes)


def oracle_solve(p: Problem, feas_tol: float = qcqp.FEAS_TOL, origin=None) -> OracleResult:
    """Exact optimum by enumerating indicator patterns, each completed by a
    convex solve over the switched-on blocks. Patterns are pruned only when
    provably infeasible or no better than the incumbent.

    ``origin`` is the point that plays the role of zero for a switched-on
    block (see :func:`qib.model.zero_image`); blocks that can sit there at no
    cost are never switched off.
    """
    if p.n_blocks > MAX_ORACLE_BLOCKS:
        raise TooLarge(f"{p.n_blocks} blocks exceed the oracle limit of {MAX_ORACLE_BLOCKS}")
    return _Oracle(p, feas_tol, origin).run()


@dataclass
class Verdict:
    passed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.passed


def compare(dp_outcome, oracle: OracleResult, n_blocks: int, val_tol: float = qcqp.VAL_TOL) -> Verdict:
    """The DP must be feasible with value at most the oracle optimum (plus
    ``n_blocks * val_tol``) whenever the oracle finds an optimum."""
    if not oracle.optimal:
        return Verdict(True, "oracle infeasible")
    if not dp_outcome.feasible:
        return Verdict(False, "dp infeasible while oracle found an optimum")
    if dp_outcome.value > oracle.value + n_blocks * val_tol:
        return Verdict(False, f"dp value {dp_outcome.value:.12g} above optimum {oracle.value:.12g}")
    return Verdict(True, "superoptimal")
