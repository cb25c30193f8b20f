"""Problem instances: blocks of continuous variables switched by binary indicators.

An instance minimizes a separable-by-block convex quadratic subject to
quadratic constraints of two kinds:

* ``mixed`` constraints: PSD block matrices, nonnegative diagonal terms,
  arbitrary linear and indicator coefficients;
* ``combinatorial`` constraints: only indicator coefficients in {-1, 0, 1}
  and an integral right-hand side.

If ``z[i] == 0`` every variable of block ``i`` is zero; if ``z[i] == 1`` the
variables lie within their bounds.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

PSD_TOL = 1e-9
MIXED = "mixed"
COMBINATORIAL = "combinatorial"
LE = "<="
EQ = "="

_KIND_ALIASES = {
    "mixed": MIXED,
    "mixed-integer": MIXED,
    "mixed_integer": MIXED,
    "combinatorial": COMBINATORIAL,
}
_SENSE_ALIASES = {"<=": LE, "≤": LE, "le": LE, "=": EQ, "==": EQ, "eq": EQ}


class ValidationError(ValueError):
    """Raised with every violation found in a problem description."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnboundedVariable(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Variable:
    id: int
    lower: float
    upper: float
    block: int


@dataclass(frozen=True)
class Block:
    id: int
    variables: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class QuadForm:
    """``sum_i x[i]' Q_i x[i] + sum_j d_j x_j^2 + sum_j c_j x_j + sum_i v_i z_i``.

    ``quad`` maps a block id to a square matrix indexed by that block's
    variables (in block order). Blocks without a quadratic term are omitted.
    """

    quad: Mapping[int, np.ndarray]
    diag: np.ndarray
    linear: np.ndarray
    indicator: np.ndarray

    def __post_init__(self):
        quad = {int(b): _frozen(0.5 * (np.asarray(m, float) + np.asarray(m, float).T))
                for b, m in self.quad.items() if np.any(np.asarray(m) != 0)}
        object.__setattr__(self, "quad", quad)
        object.__setattr__(self, "diag", _frozen(self.diag))
        object.__setattr__(self, "linear", _frozen(self.linear))
        object.__setattr__(self, "indicator", _frozen(self.indicator))

    @classmethod
    def zeros(cls, n: int, n_blocks: int) -> "QuadForm":
        return cls({}, np.zeros(n), np.zeros(n), np.zeros(n_blocks))

    def is_linear(self) -> bool:
        return not self.quad and not np.any(self.diag)

    def is_zero(self) -> bool:
        return self.is_linear() and not np.any(self.linear) and not np.any(self.indicator)

    def block_touched(self, block: Block) -> bool:
        idx = list(block.variables)
        return (block.id in self.quad
                or bool(np.any(self.diag[idx] != 0))
                or bool(np.any(self.linear[idx] != 0))
                or self.indicator[block.id] != 0)

    def block_weight(self, block: Block) -> float:
        """1-norm of every coefficient touching ``block``."""
        idx = list(block.variables)
        w = float(np.abs(self.diag[idx]).sum() + np.abs(self.linear[idx]).sum())
        w += abs(float(self.indicator[block.id]))
        if block.id in self.quad:
            w += float(np.abs(self.quad[block.id]).sum())
        return w

    def norm1(self) -> float:
        w = float(np.abs(self.diag).sum() + np.abs(self.linear).sum() + np.abs(self.indicator).sum())
        return w + sum(float(np.abs(m).sum()) for m in self.quad.values())

    def block_value(self, block: Block, xb, zb: float) -> float:
        xb = np.asarray(xb, dtype=float)
        idx = list(block.variables)
        val = float(self.diag[idx] @ (xb * xb) + self.linear[idx] @ xb)
        val += float(self.indicator[block.id]) * zb
        if block.id in self.quad:
            val += float(xb @ self.quad[block.id] @ xb)
        return val

    def evaluate(self, blocks: Sequence[Block], x, z) -> float:
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        val = float(self.diag @ (x * x) + self.linear @ x + self.indicator @ z)
        for b, m in self.quad.items():
            xb = x[list(blocks[b].variables)]
            val += float(xb @ m @ xb)
        return val

    def scaled(self, s: float) -> "QuadForm":
        return QuadForm({b: s * m for b, m in self.quad.items()},
                        s * self.diag, s * self.linear, s * self.indicator)


@dataclass(frozen=True, eq=False)
class Constraint:
    kind: str
    form: QuadForm
    sense: str = LE
    rhs: float = 0.0
    name: str = ""

    @property
    def is_mixed(self) -> bool:
        return self.kind == MIXED

    @property
    def is_combinatorial(self) -> bool:
        return self.kind == COMBINATORIAL


@dataclass(frozen=True, eq=False)
class Problem:
    variables: tuple[Variable, ...]
    blocks: tuple[Block, ...]
    objective: QuadForm
    constraints: tuple[Constraint, ...] = ()
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.variables)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def m(self) -> int:
        return len(self.constraints)

    @cached_property
    def lower(self) -> np.ndarray:
        return _frozen([v.lower for v in self.variables])

    @cached_property
    def upper(self) -> np.ndarray:
        return _frozen([v.upper for v in self.variables])

    @cached_property
    def mixed_ids(self) -> tuple[int, ...]:
        return tuple(r for r, c in enumerate(self.constraints) if c.is_mixed)

    @cached_property
    def combinatorial_ids(self) -> tuple[int, ...]:
        return tuple(r for r, c in enumerate(self.constraints) if c.is_combinatorial)

    @cached_property
    def incidence(self) -> tuple[frozenset[int], ...]:
        """Blocks touched by each constraint."""
        return tuple(frozenset(b.id for b in self.blocks if c.form.block_touched(b))
                     for c in self.constraints)

    @cached_property
    def cliques(self) -> tuple[frozenset[int], ...]:
        """Constraints touching each block."""
        out: list[set[int]] = [set() for _ in self.blocks]
        for r, blocks in enumerate(self.incidence):
            for i in blocks:
                out[i].add(r)
        return tuple(frozenset(s) for s in out)

    def block_mixed(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(r for r in self.cliques[i] if self.constraints[r].is_mixed))

    @cached_property
    def comb_support(self) -> int:
        """Largest support of a combinatorial constraint."""
        return max((len(self.incidence[r]) for r in self.combinatorial_ids), default=0)

    def objective_value(self, x, z) -> float:
        return self.objective.evaluate(self.blocks, x, z)


def evaluate_constraint(p: Problem, r: int, x, z) -> float:
    """Left-hand side of constraint ``r`` at ``(x, z)``."""
    return p.constraints[r].form.evaluate(p.blocks, x, z)


# -- construction and validation ---------------------------------------------

def _dense(vec, n: int, what: str, errors: list[str]) -> np.ndarray:
    if vec is None:
        return np.zeros(n)
    if isinstance(vec, Mapping):
        out = np.zeros(n)
        for k, v in vec.items():
            k = int(k)
            if not 0 <= k < n:
                errors.append(f"{what}: index {k} out of range")
                continue
            out[k] = float(v)
        return out
    arr = np.asarray(vec, dtype=float).reshape(-1)
    if arr.size != n:
        errors.append(f"{what}: expected length {n}, got {arr.size}")
        return np.zeros(n)
    return arr


def _form_from_dict(raw: Mapping | None, blocks: Sequence[Block], n: int, what: str,
                    errors: list[str]) -> QuadForm:
    raw = raw or {}
    quad = {}
    for entry in raw.get("quad", []) or []:
        b = int(entry["block"])
        if not 0 <= b < len(blocks):
            errors.append(f"{what}: quad block {b} out of range")
            continue
        m = np.asarray(entry["matrix"], dtype=float)
        size = len(blocks[b].variables)
        if m.shape != (size, size):
            errors.append(f"{what}: block {b} matrix has shape {m.shape}, expected {(size, size)}")
            continue
        quad[b] = quad.get(b, 0) + m
    return QuadForm(quad,
                    _dense(raw.get("diag"), n, f"{what}.diag", errors),
                    _dense(raw.get("linear"), n, f"{what}.linear", errors),
                    _dense(raw.get("indicator"), len(blocks), f"{what}.indicator", errors))


def _bound(v, default: float) -> float:
    if v is None:
        return default
    return float(v)


def problem_from_dict(raw: Mapping) -> Problem:
    """Build a problem from the JSON instance layout and validate it."""
    errors: list[str] = []
    raw_vars = list(raw.get("variables", []))
    raw_vars.sort(key=lambda v: int(v["id"]))
    variables = []
    for pos, v in enumerate(raw_vars):
        if int(v["id"]) != pos:
            errors.append(f"variable ids must be 0..n-1 (found {v['id']} at position {pos})")
        variables.append(Variable(pos, _bound(v.get("lower"), -math.inf),
                                  _bound(v.get("upper"), math.inf), int(v["block"])))
    raw_blocks = sorted(raw.get("blocks", []), key=lambda b: int(b["id"]))
    blocks = []
    for pos, b in enumerate(raw_blocks):
        if int(b["id"]) != pos:
            errors.append(f"block ids must be 0..|B|-1 (found {b['id']} at position {pos})")
        blocks.append(Block(pos, tuple(int(j) for j in b["variables"])))
    if errors:
        raise ValidationError(errors)
    n = len(variables)
    objective = _form_from_dict(raw.get("objective"), blocks, n, "objective", errors)
    constraints = []
    for r, c in enumerate(raw.get("constraints", [])):
        kind = _KIND_ALIASES.get(str(c.get("kind", MIXED)).lower())
        sense = _SENSE_ALIASES.get(str(c.get("sense", LE)).lower())
        if kind is None:
            errors.append(f"constraint {r}: unknown kind {c.get('kind')!r}")
            kind = MIXED
        if sense is None:
            errors.append(f"constraint {r}: unknown sense {c.get('sense')!r}")
            sense = LE
        form = _form_from_dict(c, blocks, n, f"constraint {r}", errors)
        constraints.append(Constraint(kind, form, sense, float(c.get("rhs", 0.0)),
                                      str(c.get("name", ""))))
    if errors:
        raise ValidationError(errors)
    return validate_problem(Problem(tuple(variables), tuple(blocks), objective,
                                    tuple(constraints), str(raw.get("name", ""))))


def _psd_violation(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(m).min())


def validate_problem(raw: Problem | Mapping) -> Problem:
    """Check structural and convexity requirements; return the (possibly
    repaired) problem or raise :class:`ValidationError` listing every issue.

    The only repair is flooring a non-integral combinatorial right-hand side.
    """
    if not isinstance(raw, Problem):
        return problem_from_dict(raw)
    p = raw
    errors: list[str] = []
    n, nb = p.n, p.n_blocks
    owner = [-1] * n
    for b in p.blocks:
        if b.id < 0 or b.id >= nb or p.blocks[b.id] is not b:
            errors.append(f"block {b.id}: ids must equal positions")
        if not b.variables:
            errors.append(f"block {b.id} is empty")
        for j in b.variables:
            if not 0 <= j < n:
                errors.append(f"block {b.id}: variable {j} out of range")
            elif owner[j] != -1:
                errors.append(f"variable {j} belongs to blocks {owner[j]} and {b.id}")
            else:
                owner[j] = b.id
    for v in p.variables:
        if 0 <= v.id < n and owner[v.id] == -1:
            errors.append(f"variable {v.id} belongs to no block")
        elif 0 <= v.id < n and owner[v.id] != v.block:
            errors.append(f"variable {v.id} claims block {v.block} but is listed in block {owner[v.id]}")
        if not v.lower <= v.upper:
            errors.append(f"variable {v.id}: lower {v.lower} > upper {v.upper}")

    def check_convex(form: QuadForm, what: str):
        for b, m in form.quad.items():
            lam = _psd_violation(m)
            if lam < -PSD_TOL:
                errors.append(f"{what}: block {b} matrix not PSD (min eigenvalue {lam:.3g})")
        if np.any(form.diag < 0):
            errors.append(f"{what}: negative diagonal coefficient")

    check_convex(p.objective, "objective")
    constraints = list(p.constraints)
    for r, c in enumerate(p.constraints):
        what = f"constraint {r}"
        if c.sense not in (LE, EQ):
            errors.append(f"{what}: unknown sense {c.sense!r}")
        if c.kind == MIXED:
            check_convex(c.form, what)
            if c.sense == EQ and not c.form.is_linear():
                errors.append(f"{what}: equality with quadratic terms")
        elif c.kind == COMBINATORIAL:
            f = c.form
            if f.quad or np.any(f.diag) or np.any(f.linear):
                errors.append(f"{what}: combinatorial constraint has continuous terms")
            if not np.all(np.isin(f.indicator, (-1.0, 0.0, 1.0))):
                errors.append(f"{what}: combinatorial coefficient outside {{-1, 0, 1}}")
            if c.sense != LE:
                errors.append(f"{what}: combinatorial constraint must use <=")
            if c.rhs != math.floor(c.rhs):
                warnings.warn(f"{what}: non-integral combinatorial rhs {c.rhs} floored")
                constraints[r] = Constraint(c.kind, c.form, c.sense, float(math.floor(c.rhs)), c.name)
        else:
            errors.append(f"{what}: unknown kind {c.kind!r}")
        if not math.isfinite(c.rhs):
            errors.append(f"{what}: non-finite rhs")
    if errors:
        raise ValidationError(errors)
    if any(a is not b for a, b in zip(constraints, p.constraints)):
        p = Problem(p.variables, p.blocks, p.objective, tuple(constraints), p.name)
    return p


def _quad_to_dict(form: QuadForm) -> dict:
    return {
        "quad": [{"block": b, "matrix": m.tolist()} for b, m in sorted(form.quad.items())],
        "diag": form.diag.tolist(),
        "linear": form.linear.tolist(),
        "indicator": form.indicator.tolist(),
    }


def problem_to_dict(p: Problem) -> dict:
    def bound(v):
        return v if math.isfinite(v) else None

    out = {
        "variables": [{"id": v.id, "lower": bound(v.lower), "upper": bound(v.upper), "block": v.block}
                      for v in p.variables],
        "blocks": [{"id": b.id, "variables": list(b.variables)} for b in p.blocks],
        "objective": _quad_to_dict(p.objective),
        "constraints": [dict(_quad_to_dict(c.form), kind=c.kind, sense=c.sense, rhs=c.rhs,
                             **({"name": c.name} if c.name else {}))
                        for c in p.constraints],
    }
    if p.name:
        out["name"] = p.name
    return out


# -- normalization -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormalizationTransform:
    """Map between original and normalized coordinates.

    Original variable ``j`` of block ``b`` relates to the normalized one by
    ``x_j = lower_j * z_b + scale_j * x'_j``; this keeps ``z_b = 0`` meaning
    ``x = 0`` on both sides. Fixed variables (``scale_j == 0``) have no
    normalized counterpart (``new_index[j] == -1``).
    """

    lower: np.ndarray
    scale: np.ndarray
    block_of: np.ndarray
    new_index: np.ndarray
    n_new: int
    constraint_scale: np.ndarray
    n_original_constraints: int
    offset: float = 0.0

    def is_identity(self) -> bool:
        return (not np.any(self.lower) and np.all(self.scale == 1.0)
                and np.all(self.constraint_scale == 1.0)
                and np.array_equal(self.new_index, np.arange(len(self.lower))))


def _block_z(block_of: np.ndarray, z, n_blocks: int | None = None) -> np.ndarray:
    if z is None:
        return np.ones(len(block_of))
    z = np.asarray(z, dtype=float)
    return z[block_of]


def denormalize_solution(t: NormalizationTransform, x, obj: float, z=None) -> tuple[np.ndarray, float]:
    """Original-space point and objective. ``z`` defaults to all blocks on."""
    x = np.asarray(x, dtype=float)
    zj = _block_z(t.block_of, z)
    out = t.lower * zj
    free = t.new_index >= 0
    out[free] += t.scale[free] * x[t.new_index[free]]
    return out, float(obj) + t.offset


def normalize_point(t: NormalizationTransform, x, z=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    zj = _block_z(t.block_of, z)
    out = np.zeros(t.n_new)
    free = t.new_index >= 0
    out[t.new_index[free]] = (x[free] - t.lower[free] * zj[free]) / t.scale[free]
    return out


def zero_image(t: NormalizationTransform) -> np.ndarray:
    """Normalized point that maps back to ``x = 0`` with every block on;
    coordinates leave ``[0, 1]`` for variables whose bounds exclude zero."""
    return normalize_point(t, np.zeros(len(t.lower)))


def _substitute(form: QuadForm, p: Problem, new_blocks: list[list[int]], lower, scale,
                new_index, n_new: int) -> QuadForm:
    """Rewrite ``form`` under ``x_j = lower_j z + scale_j x'_j`` using ``z x' = x'``."""
    diag = np.zeros(n_new)
    lin = np.zeros(n_new)
    ind = np.array(form.indicator, dtype=float)
    quad = {}
    for b in p.blocks:
        idx = np.array(b.variables, dtype=int)
        lo, sc = lower[idx], scale[idx]
        keep = new_index[idx] >= 0
        tgt = new_index[idx][keep]
        d, c = form.diag[idx], form.linear[idx]
        ind[b.id] += float(np.sum(d * lo * lo) + np.sum(c * lo))
        diag[tgt] += (d * sc * sc)[keep]
        lin[tgt] += (2 * d * lo * sc + c * sc)[keep]
        if b.id in form.quad:
            m = form.quad[b.id]
            ind[b.id] += float(lo @ m @ lo)
            lin[tgt] += (2 * sc * (m @ lo))[keep]
            sq = (sc[:, None] * m * sc[None, :])[np.ix_(keep, keep)]
            if sq.size:
                quad[b.id] = sq
    return QuadForm(quad, diag, lin, ind)


def normalize(p: Problem) -> tuple[Problem, NormalizationTransform]:
    """Rescale to unit boxes and unit 1-norm mixed constraints.

    Every bound becomes [0, 1]; each mixed constraint is divided by the
    1-norm of its coefficients. Blocks containing a variable whose bounds
    exclude zero must be switched on, which is made explicit by appending a
    combinatorial constraint ``-z_i <= -1``.
    """
    lower, upper = np.array(p.lower), np.array(p.upper)
    bad = [j for j in range(p.n) if not (math.isfinite(lower[j]) and math.isfinite(upper[j]))]
    if bad:
        raise UnboundedVariable(f"variables with infinite bounds: {bad}")
    scale = upper - lower
    new_index = np.full(p.n, -1, dtype=int)
    new_vars: list[Variable] = []
    new_blocks: list[list[int]] = [[] for _ in p.blocks]
    for b in p.blocks:
        for j in b.variables:
            if scale[j] > 0:
                new_index[j] = len(new_vars)
                new_blocks[b.id].append(len(new_vars))
                new_vars.append(Variable(len(new_vars), 0.0, 1.0, b.id))
    n_new = len(new_vars)
    blocks = tuple(Block(i, tuple(v)) for i, v in enumerate(new_blocks))

    def sub(form):
        return _substitute(form, p, new_blocks, lower, scale, new_index, n_new)

    constraints = []
    cscale = np.ones(p.m)
    errors = []
    for r, c in enumerate(p.constraints):
        if c.is_combinatorial:
            constraints.append(c)
            continue
        f = sub(c.form)
        norm = f.norm1()
        if norm <= 1e-300:
            errors.append(f"constraint {r}: all coefficients zero after substitution (degenerate)")
            continue
        s = 1.0 / norm
        cscale[r] = s
        constraints.append(Constraint(c.kind, f.scaled(s), c.sense, c.rhs * s, c.name))
    if errors:
        raise ValidationError(errors)
    for b in p.blocks:
        if any(lower[j] > 0 or upper[j] < 0 for j in b.variables):
            ind = np.zeros(p.n_blocks)
            ind[b.id] = -1.0
            constraints.append(Constraint(COMBINATORIAL, QuadForm({}, np.zeros(n_new), np.zeros(n_new), ind),
                                          LE, -1.0, f"on[{b.id}]"))
    q = Problem(tuple(new_vars), blocks, sub(p.objective), tuple(constraints), p.name)
    t = NormalizationTransform(_frozen(lower), _frozen(scale),
                               np.array([v.block for v in p.variables], dtype=int),
                               new_index, n_new, _frozen(cscale), p.m)
    return q, t


def is_normalized(p: Problem, tol: float = 1e-12) -> bool:
    if np.any(p.lower != 0) or np.any(p.upper != 1):
        return False
    return all(abs(p.constraints[r].form.norm1() - 1.0) <= tol for r in p.mixed_ids)


def single_blocks(n: int) -> tuple[tuple[Variable, ...], tuple[Block, ...]]:
    """Variables in [0, 1], each its own block (bounds overwritten by callers)."""
    return (tuple(Variable(j, 0.0, 1.0, j) for j in range(n)),
            tuple(Block(j, (j,)) for j in range(n)))


def linear_form(n: int, n_blocks: int, linear: Iterable[tuple[int, float]] = (),
                indicator: Iterable[tuple[int, float]] = ()) -> QuadForm:
    c = np.zeros(n)
    for j, a in linear:
        c[j] += a
    v = np.zeros(n_blocks)
    for i, a in indicator:
        v[i] += a
    return QuadForm({}, np.zeros(n), c, v)
