"""Small dense convex QCQPs over a box, solved by a log-barrier method.

The solver works in two phases. Phase 1 minimizes the largest constraint
violation ``s`` over the box (box kept hard, constraints softened by ``s``);
its optimum decides feasibility. Phase 2 runs barrier path following on the
original problem from the phase-1 point. When the feasible set has no
interior (equality rows, constraints tight at the box, ...) equalities are
eliminated through a null-space basis and the inequalities are relaxed by a
tiny margin so that the barrier has room to work.

One-dimensional problems are solved in closed form: every convex quadratic
constraint in one variable is an interval.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
VAL_TOL = 1e-7
KKT_TOL = 1e-6
RELAX = 1e-9
_GAP = 1e-10
_MU = 10.0
_NEWTON_TOL = 1e-10
MAX_NEWTON = 200


class NumericalFailure(RuntimeError):
    pass


@dataclass
class QcqpConstraint:
    """``x'Qx + sum d_j x_j^2 + c'x  (<= | =)  rhs``; ``=`` only when linear."""

    c: np.ndarray
    rhs: float
    Q: np.ndarray | None = None
    d: np.ndarray | None = None
    sense: str = "<="


@dataclass
class LinearRow:
    a: np.ndarray
    lower: float = -math.inf
    upper: float = math.inf


@dataclass
class BlockQcqp:
    """``min x'Qx + d'x^2 + c'x + const`` over ``lower <= x <= upper``."""

    c: np.ndarray
    Q: np.ndarray | None = None
    d: np.ndarray | None = None
    const: float = 0.0
    constraints: Sequence[QcqpConstraint] = ()
    rows: Sequence[LinearRow] = ()
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.c)


@dataclass
class QcqpResult:
    status: str
    x: np.ndarray
    value: float
    kkt_residual: float = math.inf
    max_violation: float = math.inf
    multipliers: dict = field(default_factory=dict)
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# -- canonical form ----------------------------------------------------------

@dataclass
class _Canon:
    """Objective ``x'P0x + a0'x + const``; ``quad``: ``x'Px + a'x <= b``;
    ``A x <= b``; ``E x = e``; finite box entries only."""

    n: int
    P0: np.ndarray | None
    a0: np.ndarray
    const: float
    quad: list
    A: np.ndarray
    b: np.ndarray
    E: np.ndarray
    e: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def objective(self, x) -> float:
        v = float(self.a0 @ x) + self.const
        if self.P0 is not None:
            v += float(x @ self.P0 @ x)
        return v

    def violations(self, x) -> np.ndarray:
        """Positive entries are violations; box included."""
        parts = [np.array([float(x @ P @ x + a @ x - b) if P is not None else float(a @ x - b)
                           for P, a, b in self.quad])]
        parts.append(self.A @ x - self.b)
        parts.append(np.abs(self.E @ x - self.e))
        fin_lo = np.isfinite(self.lo)
        fin_hi = np.isfinite(self.hi)
        parts.append((self.lo - x)[fin_lo])
        parts.append((x - self.hi)[fin_hi])
        return np.concatenate(parts) if parts else np.zeros(0)


def _canon(q: BlockQcqp) -> _Canon:
    n = q.dim
    P0 = None
    if q.Q is not None and np.any(q.Q):
        P0 = 0.5 * (np.asarray(q.Q, float) + np.asarray(q.Q, float).T)
    if q.d is not None and np.any(q.d):
        P0 = (np.zeros((n, n)) if P0 is None else P0) + np.diag(np.asarray(q.d, float))
    quad, A_rows, b_rows, E_rows, e_rows = [], [], [], [], []
    for con in q.constraints:
        c = np.asarray(con.c, float)
        P = None
        if con.Q is not None and np.any(con.Q):
            P = 0.5 * (np.asarray(con.Q, float) + np.asarray(con.Q, float).T)
        if con.d is not None and np.any(con.d):
            P = (np.zeros((n, n)) if P is None else P) + np.diag(np.asarray(con.d, float))
        if con.sense == "=":
            if P is not None:
                raise ValueError("equality constraints must be linear")
            E_rows.append(c)
            e_rows.append(con.rhs)
        elif P is None:
            A_rows.append(c)
            b_rows.append(con.rhs)
        else:
            quad.append((P, c, float(con.rhs)))
    for row in q.rows:
        a = np.asarray(row.a, float)
        if math.isfinite(row.lower) and row.upper == row.lower:
            E_rows.append(a)
            e_rows.append(0.5 * (row.lower + row.upper))
            continue
        if math.isfinite(row.upper):
            A_rows.append(a)
            b_rows.append(row.upper)
        if math.isfinite(row.lower):
            A_rows.append(-a)
            b_rows.append(-row.lower)
    lo = np.zeros(n) if q.lower is None else np.array(q.lower, float)
    hi = np.ones(n) if q.upper is None else np.array(q.upper, float)
    fixed = np.isfinite(lo) & np.isfinite(hi) & (hi - lo <= 0)
    for j in np.flatnonzero(fixed):
        row = np.zeros(n)
        row[j] = 1.0
        E_rows.append(row)
        e_rows.append(0.5 * (lo[j] + hi[j]))
        lo[j], hi[j] = -math.inf, math.inf
    return _Canon(n, P0, np.asarray(q.c, float), float(q.const), quad,
                  np.array(A_rows, float).reshape(len(A_rows), n), np.array(b_rows, float),
                  np.array(E_rows, float).reshape(len(E_rows), n), np.array(e_rows, float), lo, hi)


# -- barrier core ------------------------------------------------------------

class _Barrier:
    """``min f0(y)`` s.t. ``y'P_i y + a_i'y <= b_i`` and ``A y <= b``."""

    def __init__(self, P0, a0, quad, A, b):
        self.P0 = P0
        self.a0 = a0
        self.quad = quad
        self.A = A
        self.b = b
        self.m = len(quad) + len(b)

    def slacks(self, y):
        sl = self.b - self.A @ y
        sq = np.array([b - (y @ P @ y if P is not None else 0.0) - a @ y for P, a, b in self.quad])
        return sl, sq

    def f0(self, y):
        v = float(self.a0 @ y)
        if self.P0 is not None:
            v += float(y @ self.P0 @ y)
        return v

    def phi(self, y, t):
        sl, sq = self.slacks(y)
        if np.any(sl <= 0) or np.any(sq <= 0):
            return math.inf
        return t * self.f0(y) - float(np.log(sl).sum()) - float(np.log(sq).sum())

    def run(self, y, t=1.0, gap=_GAP, budget=MAX_NEWTON, stop=None):
        """Path following from strictly feasible ``y``. Returns
        ``(y, t, lam_lin, lam_quad, iterations)``."""
        n = len(y)
        iters = 0
        if self.m == 0:
            raise ValueError("barrier needs at least one constraint")
        while True:
            # centering
            while True:
                sl, sq = self.slacks(y)
                g = t * self.a0.copy()
                H = np.zeros((n, n))
                if self.P0 is not None:
                    g += 2 * t * (self.P0 @ y)
                    H += 2 * t * self.P0
                if len(sl):
                    inv = 1.0 / sl
                    g += self.A.T @ inv
                    H += (self.A.T * (inv * inv)) @ self.A
                for (P, a, _), s in zip(self.quad, sq):
                    gi = a + (2 * (P @ y) if P is not None else 0.0)
                    g += gi / s
                    H += np.outer(gi, gi) / (s * s)
                    if P is not None:
                        H += 2 * P / s
                try:
                    dy = -np.linalg.solve(H, g)
                except np.linalg.LinAlgError:
                    dy = -np.linalg.lstsq(H, g, rcond=None)[0]
                if not np.all(np.isfinite(dy)):
                    raise NumericalFailure("non-finite Newton step")
                dec = -float(g @ dy)
                if dec / 2 <= _NEWTON_TOL:
                    break
                phi0 = self.phi(y, t)
                # decrement below the rounding level of phi: as centered as it gets
                if dec <= 1e-13 * abs(phi0):
                    break
                iters += 1
                if iters > budget:
                    raise NumericalFailure(f"Newton iteration cap {budget} exceeded")
                alpha = 1.0
                while alpha >= 1e-14:
                    ynew = y + alpha * dy
                    ph = self.phi(ynew, t)
                    if ph <= phi0 - 0.01 * alpha * dec:
                        break
                    alpha *= 0.5
                if (alpha < 1e-14 or phi0 - ph <= 1e-15 * max(1.0, abs(phi0))
                        or (alpha < 1e-6 and dec < 1e-6)):
                    # no progress at this precision; treat as centered
                    break
                y = ynew
                if stop is not None and stop(y, t, False):
                    sl, sq = self.slacks(y)
                    return y, t, 1.0 / (t * sl), 1.0 / (t * sq), iters
            if stop is not None and stop(y, t, True):
                break
            if self.m / t < gap:
                break
            t *= _MU
        sl, sq = self.slacks(y)
        return y, t, 1.0 / (t * sl), 1.0 / (t * sq), iters


def _box_rows(lo, hi, n):
    rows, rhs = [], []
    for j in range(n):
        if math.isfinite(hi[j]):
            r = np.zeros(n)
            r[j] = 1.0
            rows.append(r)
            rhs.append(hi[j])
        if math.isfinite(lo[j]):
            r = np.zeros(n)
            r[j] = -1.0
            rows.append(r)
            rhs.append(-lo[j])
    return np.array(rows, float).reshape(-1, n), np.array(rhs, float)


def _center(cp: _Canon) -> np.ndarray:
    lo = np.where(np.isfinite(cp.lo), cp.lo, np.nan)
    hi = np.where(np.isfinite(cp.hi), cp.hi, np.nan)
    x = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                 np.where(np.isfinite(lo), lo + 1.0, np.where(np.isfinite(hi), hi - 1.0, 0.0)))
    return np.nan_to_num(x)


def _nullspace(cp: _Canon):
    """Particular solution and null-space basis of ``E x = e``; the third
    value is the residual of the particular solution."""
    n = cp.n
    if not len(cp.e):
        return np.zeros(n), np.eye(n), 0.0
    _, sv, Vt = np.linalg.svd(cp.E)
    rank = int(np.sum(sv > max(cp.E.shape) * np.finfo(float).eps * max(sv[0], 1.0)))
    xp = np.linalg.lstsq(cp.E, cp.e, rcond=None)[0]
    res = float(np.abs(cp.E @ xp - cp.e).max())
    return xp, Vt[rank:].T, res


def _maxviol(cp: _Canon, x) -> float:
    box = np.concatenate([(cp.lo - x)[np.isfinite(cp.lo)], (x - cp.hi)[np.isfinite(cp.hi)]])
    return max(vals_at(cp, x) + list(box), default=0.0)


def _phase1(cp: _Canon, margin: float | None = None, budget: int = MAX_NEWTON):
    """Minimize the largest violation ``s``.

    Without equalities the box stays hard. With equalities they are
    eliminated exactly and the box is softened by ``s`` as well.
    Returns ``(x, s, iterations)``. With ``margin`` set and no equalities,
    stop as soon as ``s < -margin``.
    """
    n = cp.n
    x0 = _center(cp)
    has_eq = len(cp.e) > 0
    if not (len(cp.quad) + len(cp.b) + len(cp.e)):
        return x0, 0.0, 0
    xp, Z, res = _nullspace(cp)
    if res > FEAS_TOL:
        return xp, res, 0
    k = Z.shape[1]
    if has_eq:
        x0 = xp + Z @ (Z.T @ (x0 - xp))
        if k == 0:
            return xp, _maxviol(cp, xp), 0
    Ab, bb = _box_rows(cp.lo, cp.hi, n)
    s0 = (_maxviol(cp, x0) if has_eq else max(vals_at(cp, x0))) + 1.0
    # y = (w, s) with x = xp + Z w
    quad = []
    for P, a, b in cp.quad:
        if P is not None:
            Py = np.zeros((k + 1, k + 1))
            Py[:k, :k] = Z.T @ P @ Z
            ay = np.append(Z.T @ (2 * P @ xp + a), -1.0)
            by = b - float(xp @ P @ xp + a @ xp)
        else:
            Py, ay, by = None, np.append(Z.T @ a, -1.0), b - float(a @ xp)
        quad.append((Py, ay, by))
    box_s = -np.ones((len(bb), 1)) if has_eq else np.zeros((len(bb), 1))
    A = np.vstack([np.hstack([cp.A @ Z, -np.ones((len(cp.b), 1))]), np.hstack([Ab @ Z, box_s])])
    b = np.concatenate([cp.b - cp.A @ xp, bb - Ab @ xp])
    a0 = np.zeros(k + 1)
    a0[k] = 1.0
    bar = _Barrier(None, a0, quad, A, b)
    y0 = np.append(Z.T @ (x0 - xp), s0)
    m = bar.m

    def guard(y, t, centered):
        # on the central path s - m/t bounds the optimum from below
        if y[k] < -1e6:
            return True
        if centered:
            lower = y[k] - m / t
            if lower > FEAS_TOL:
                return True
            # optimum pinned near zero: the relaxed phase 2 takes over
            if y[k] <= 1e-9 and lower >= -(margin or 0.0):
                return True
        return margin is not None and not has_eq and y[k] < -margin

    y, t, *_, iters = bar.run(y0, t=1.0, gap=1e-11, budget=budget, stop=guard)
    x = xp + Z @ y[:k]
    # the exact max violation at x (the barrier's s is only an upper bound)
    s = _maxviol(cp, x) if has_eq else max(vals_at(cp, x))
    return x, s, iters


def vals_at(cp: _Canon, x) -> list[float]:
    vals = [float(x @ P @ x + a @ x - b) if P is not None else float(a @ x - b) for P, a, b in cp.quad]
    vals += list(cp.A @ x - cp.b)
    vals += list(np.abs(cp.E @ x - cp.e))
    return vals


def phase1(q: BlockQcqp) -> tuple[np.ndarray, float]:
    """Minimizer of the largest constraint violation over the box and that
    violation. Nonpositive means feasible."""
    cp = _canon(q)
    if cp.n == 0:
        vals = vals_at(cp, np.zeros(0))
        return np.zeros(0), max(vals, default=0.0)
    if cp.n == 1:
        x, s = _phase1_1d(cp)
        return x, s
    x, s, _ = _phase1(cp)
    return x, s


# -- multipliers and KKT -----------------------------------------------------

def _grads(cp: _Canon, x):
    """Gradients of objective, quad constraints, linear rows, box rows."""
    g0 = cp.a0 + (2 * cp.P0 @ x if cp.P0 is not None else 0.0)
    gq = [a + (2 * P @ x if P is not None else 0.0) for P, a, _ in cp.quad]
    return g0, gq


def kkt_residual(q: BlockQcqp, x, multipliers: dict) -> float:
    """Largest of stationarity, complementarity, dual and primal feasibility
    residuals. ``multipliers`` holds ``quad``, ``lin``, ``eq``, ``lo``, ``hi``
    arrays (missing entries count as zero)."""
    cp = _canon(q)
    return _kkt(cp, np.asarray(x, float), multipliers)


def _kkt(cp: _Canon, x, mult: dict) -> float:
    n = cp.n
    if n == 0:
        return max([0.0] + [max(v, 0.0) for v in vals_at(cp, x)])
    lq = np.asarray(mult.get("quad", np.zeros(len(cp.quad))), float)
    ll = np.asarray(mult.get("lin", np.zeros(len(cp.b))), float)
    le = np.asarray(mult.get("eq", np.zeros(len(cp.e))), float)
    llo = np.asarray(mult.get("lo", np.zeros(n)), float)
    lhi = np.asarray(mult.get("hi", np.zeros(n)), float)
    g0, gq = _grads(cp, x)
    stat = g0.copy()
    for lam, g in zip(lq, gq):
        stat += lam * g
    if len(ll):
        stat += cp.A.T @ ll
    if len(le):
        stat += cp.E.T @ le
    stat += lhi - llo
    fq = np.array([float(x @ P @ x + a @ x - b) if P is not None else float(a @ x - b)
                   for P, a, b in cp.quad])
    fl = cp.A @ x - cp.b
    flo = np.where(np.isfinite(cp.lo), cp.lo - x, 0.0)
    fhi = np.where(np.isfinite(cp.hi), x - cp.hi, 0.0)
    comp = np.concatenate([lq * fq, ll * fl, llo * flo, lhi * fhi])
    dual = np.concatenate([lq, ll, llo, lhi])
    primal = np.concatenate([fq, fl, flo, fhi, np.abs(cp.E @ x - cp.e)])
    res = [float(np.abs(stat).max(initial=0.0)), float(np.abs(comp).max(initial=0.0)),
           float(np.maximum(-dual, 0).max(initial=0.0)), float(np.maximum(primal, 0).max(initial=0.0))]
    return max(res)


def estimate_multipliers(q: BlockQcqp, x, act_tol: float = 1e-7) -> dict:
    return _estimate(_canon(q), np.asarray(x, float), act_tol)


def _estimate(cp: _Canon, x, act_tol: float = 1e-7) -> dict:
    """Nonnegative least-squares multipliers on the near-active set."""
    n = cp.n
    g0, gq = _grads(cp, x)
    cols, tags = [], []
    for i, (P, a, b) in enumerate(cp.quad):
        f = float(x @ P @ x + a @ x - b) if P is not None else float(a @ x - b)
        if f >= -act_tol:
            cols.append(gq[i])
            tags.append(("quad", i, 1.0))
    fl = cp.A @ x - cp.b
    for i in np.flatnonzero(fl >= -act_tol):
        cols.append(cp.A[i])
        tags.append(("lin", i, 1.0))
    for i in range(len(cp.e)):
        cols.append(cp.E[i])
        tags.append(("eq", i, 1.0))
        cols.append(-cp.E[i])
        tags.append(("eq", i, -1.0))
    for j in range(n):
        if math.isfinite(cp.lo[j]) and x[j] - cp.lo[j] <= act_tol:
            e = np.zeros(n)
            e[j] = -1.0
            cols.append(e)
            tags.append(("lo", j, 1.0))
        if math.isfinite(cp.hi[j]) and cp.hi[j] - x[j] <= act_tol:
            e = np.zeros(n)
            e[j] = 1.0
            cols.append(e)
            tags.append(("hi", j, 1.0))
    mult = {"quad": np.zeros(len(cp.quad)), "lin": np.zeros(len(cp.b)), "eq": np.zeros(len(cp.e)),
            "lo": np.zeros(n), "hi": np.zeros(n)}
    if cols:
        M = np.array(cols).T
        lam, _ = nnls(M, -g0, maxiter=50 * M.shape[1] + 50)
        for (kind, i, sign), v in zip(tags, lam):
            mult[kind][i] += sign * v
    return mult


# -- closed form in one dimension -------------------------------------------

def _interval_1d(p: float, a: float, b: float) -> tuple[float, float]:
    """``{x : p x^2 + a x <= b}`` for ``p >= 0``."""
    if p > 0:
        disc = a * a + 4 * p * b
        if disc < 0:
            return math.inf, -math.inf
        r = math.sqrt(disc)
        qq = -0.5 * (a + math.copysign(r, a))
        if qq == 0:
            return 0.0, 0.0
        x1, x2 = qq / p, -b / qq
        return min(x1, x2), max(x1, x2)
    if a > 0:
        return -math.inf, b / a
    if a < 0:
        return b / a, math.inf
    return (-math.inf, math.inf) if b >= 0 else (math.inf, -math.inf)


def _feasible_interval(cp: _Canon) -> tuple[float, float]:
    lo, hi = cp.lo[0], cp.hi[0]
    for P, a, b in cp.quad:
        l, h = _interval_1d(float(P[0, 0]) if P is not None else 0.0, float(a[0]), b)
        lo, hi = max(lo, l), min(hi, h)
    for a, b in zip(cp.A[:, 0], cp.b):
        l, h = _interval_1d(0.0, float(a), float(b))
        lo, hi = max(lo, l), min(hi, h)
    for a, e in zip(cp.E[:, 0], cp.e):
        if a != 0:
            lo, hi = max(lo, e / a), min(hi, e / a)
        elif abs(e) > 0:
            return math.inf, -math.inf
    return lo, hi


def _maxviol_1d(cp: _Canon, x: float) -> float:
    return max(vals_at(cp, np.array([x])), default=-math.inf)


def _phase1_1d(cp: _Canon) -> tuple[np.ndarray, float]:
    lo, hi = cp.lo[0], cp.hi[0]
    if not (len(cp.quad) + len(cp.b) + len(cp.e)):
        return _center(cp), 0.0
    if not (math.isfinite(lo) and math.isfinite(hi)):
        lo = lo if math.isfinite(lo) else -1e6
        hi = hi if math.isfinite(hi) else 1e6
    # max of convex functions is convex: golden section
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = _maxviol_1d(cp, c), _maxviol_1d(cp, d)
    for _ in range(200):
        if b - a <= 1e-15 * max(1.0, abs(a), abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = _maxviol_1d(cp, c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = _maxviol_1d(cp, d)
    cands = [lo, hi, c, d]
    x = min(cands, key=lambda v: _maxviol_1d(cp, v))
    return np.array([x]), _maxviol_1d(cp, x)


def _solve_1d(cp: _Canon, feas_tol: float) -> QcqpResult:
    lo, hi = _feasible_interval(cp)
    if lo > hi:
        mid = 0.5 * (lo + hi) if math.isfinite(lo + hi) else None
        if mid is None or max(vals_at(cp, np.array([mid])) + [cp.lo[0] - mid, mid - cp.hi[0]]) > feas_tol:
            x, s = _phase1_1d(cp)
            if s > feas_tol:
                return QcqpResult("infeasible", x, math.inf, max_violation=s)
            lo = hi = float(x[0])
        else:
            lo = hi = mid
    p = float(cp.P0[0, 0]) if cp.P0 is not None else 0.0
    a = float(cp.a0[0])
    if p > 0:
        x = -a / (2 * p)
    elif a > 0:
        x = lo
    elif a < 0:
        x = hi
    else:
        x = lo if math.isfinite(lo) else (hi if math.isfinite(hi) else 0.0)
    if not math.isfinite(x) or x < lo or x > hi:
        x = min(max(x, lo), hi)
    if not math.isfinite(x):
        raise NumericalFailure("unbounded one-dimensional problem")
    xv = np.array([x])
    viol = max([0.0] + vals_at(cp, xv))
    mult = _estimate(cp, xv)
    return QcqpResult("optimal", xv, cp.objective(xv), _kkt(cp, xv, mult), viol, mult, 0)


# -- driver ------------------------------------------------------------------

def solve(q: BlockQcqp, feas_tol: float = FEAS_TOL) -> QcqpResult:
    """Minimize ``q``; status ``infeasible`` when the smallest achievable
    maximum violation exceeds ``feas_tol``."""
    cp = _canon(q)
    n = cp.n
    if n == 0:
        x = np.zeros(0)
        viol = max(vals_at(cp, x), default=0.0)
        if viol > feas_tol:
            return QcqpResult("infeasible", x, math.inf, max_violation=viol)
        return QcqpResult("optimal", x, cp.const, 0.0, max(viol, 0.0))
    if n == 1:
        return _solve_1d(cp, feas_tol)
    return _solve_nd(cp, feas_tol)


def _solve_nd(cp: _Canon, feas_tol: float) -> QcqpResult:
    n = cp.n
    margin = 1e-6
    x1 = _center(cp)
    has_eq = len(cp.e) > 0
    vals = vals_at(cp, x1)
    box_ok = np.all(x1 > cp.lo) and np.all(x1 < cp.hi)
    iters = 0
    if not has_eq and box_ok and (not vals or max(vals) < -margin):
        s = max(vals, default=-math.inf)
    else:
        x1, s, iters = _phase1(cp, margin=margin)
        if s > feas_tol:
            return QcqpResult("infeasible", x1, math.inf, max_violation=s, iterations=iters)
    budget = MAX_NEWTON - iters + MAX_NEWTON // 2
    if not has_eq and s < -margin:
        A, b = _box_rows(cp.lo, cp.hi, n)
        A = np.vstack([cp.A, A])
        b = np.concatenate([cp.b, b])
        bar = _Barrier(cp.P0, cp.a0, cp.quad, A, b)
        y, t, lam_lin, lam_quad, it2 = bar.run(x1, budget=budget)
        x = y
        k = len(cp.b)
        mult = {"quad": lam_quad, "lin": lam_lin[:k], **_split_box(lam_lin[k:], cp.lo, cp.hi, n)}
    else:
        x, mult, it2 = _relaxed(cp, x1, max(s, 0.0) + RELAX, budget)
    iters += it2
    x = np.clip(x, cp.lo, cp.hi)
    viol = max([0.0] + vals_at(cp, x))
    if viol > feas_tol and max(s, 0.0) <= feas_tol:
        log.debug("solution violation %.3g above tolerance after relaxation", viol)
    kkt = _kkt(cp, x, mult)
    if kkt > KKT_TOL:
        alt = _estimate(cp, x)
        alt_kkt = _kkt(cp, x, alt)
        if alt_kkt < kkt:
            mult, kkt = alt, alt_kkt
    return QcqpResult("optimal", x, cp.objective(x), kkt, viol, mult, iters)


def _split_box(lam, lo, hi, n):
    out_lo, out_hi = np.zeros(n), np.zeros(n)
    k = 0
    for j in range(n):
        if math.isfinite(hi[j]):
            out_hi[j] = lam[k]
            k += 1
        if math.isfinite(lo[j]):
            out_lo[j] = lam[k]
            k += 1
    return {"lo": out_lo, "hi": out_hi}


def _relaxed(cp: _Canon, x1, r: float, budget: int):
    """Barrier on the problem with inequalities (and, with equalities, the
    box) loosened by ``r``; equalities eliminated exactly."""
    n = cp.n
    xp, Z, _ = _nullspace(cp)
    box_r = r if len(cp.e) else 0.0
    if Z.shape[1] == 0:
        x = xp
        mult = _estimate(cp, np.clip(x, cp.lo, cp.hi))
        return x, mult, 0
    w0 = Z.T @ (x1 - xp)
    x0 = xp + Z @ w0
    # rows in w-space: quad, linear, box
    Ab, bb = _box_rows(cp.lo, cp.hi, n)
    A_all = np.vstack([cp.A, Ab])
    b_all = np.concatenate([cp.b, bb])
    if len(cp.e):
        r = max(r, max([0.0] + vals_at(cp, x0) + list(Ab @ x0 - bb)) + RELAX)
        box_r = r
    b_relax = np.concatenate([cp.b + r, bb + box_r])
    A_w = A_all @ Z
    b_w = b_relax - A_all @ xp
    quad_w = []
    for P, a, b in cp.quad:
        if P is not None:
            Pw = Z.T @ P @ Z
            aw = Z.T @ (2 * P @ xp + a)
            bw = b + r - float(xp @ P @ xp + a @ xp)
        else:
            Pw, aw, bw = None, Z.T @ a, b + r - float(a @ xp)
        quad_w.append((Pw, aw, bw))
    P0w = Z.T @ cp.P0 @ Z if cp.P0 is not None else None
    a0w = Z.T @ (cp.a0 + (2 * cp.P0 @ xp if cp.P0 is not None else 0.0))
    bar = _Barrier(P0w, a0w, quad_w, A_w, b_w)
    if bar.m == 0:
        raise NumericalFailure("unconstrained direction in relaxed problem")
    w, t, lam_lin, lam_quad, iters = bar.run(w0, budget=budget)
    x = xp + Z @ w
    k = len(cp.b)
    mult = {"quad": lam_quad, "lin": lam_lin[:k], **_split_box(lam_lin[k:], cp.lo, cp.hi, n)}
    if len(cp.e):
        g0, gq = _grads(cp, x)
        stat = g0 + sum((l * g for l, g in zip(lam_quad, gq)), np.zeros(n))
        stat += cp.A.T @ mult["lin"] + mult["hi"] - mult["lo"]
        mult["eq"] = np.linalg.lstsq(cp.E.T, -stat, rcond=None)[0]
    return x, mult, iters
