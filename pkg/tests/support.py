"""Shared helpers for the test suite: instance builders and independent
reference solvers."""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

from qib import dp, gen, graph, model, qcqp, sketch, verify


# -- instances ---------------------------------------------------------------

def random_problem(rng: np.random.Generator, max_blocks: int = 6, max_size: int = 2, max_mixed: int = 3,
                   max_comb: int = 2, eq_prob: float = 0.3) -> model.Problem:
    nb = int(rng.integers(1, max_blocks + 1))
    sizes = [int(rng.integers(1, max_size + 1)) for _ in range(nb)]
    return gen.gen_random(rng, nb, sizes, int(rng.integers(0, max_mixed + 1)), int(rng.integers(0, max_comb + 1)),
                          eq_prob=eq_prob)


def random_banded(rng: np.random.Generator, n: int, k: int) -> gen.BandedData:
    M = np.tril(np.triu(rng.normal(size=(n, n)), -k))
    Q = M @ M.T + 0.3 * np.eye(n)
    return gen.BandedData(Q, 2 * rng.normal(size=n), rng.uniform(-0.5, 1.5, n), k)


def random_portfolio(rng: np.random.Generator, n: int, H: int, R: int, N: int | None = None) -> gen.PortfolioData:
    return gen.PortfolioData(rng.uniform(0.5, 2.0, H), rng.normal(size=(H, n)), rng.uniform(0, 0.3, n),
                             rng.uniform(0, 1, n), rng.uniform(0, 1, (R, n)), rng.uniform(0.5, 1.5, R),
                             rng.uniform(0.5, 1.5, n), int(rng.integers(1, n + 1)) if N is None else N)


# -- pipeline ------------------------------------------------------------------

class Run:
    """Normalized instance pushed through decomposition, sketches and the DP."""

    def __init__(self, p: model.Problem, eps, td=None, normalized: bool = False):
        self.eps = Fraction(eps)
        if normalized:
            self.q, self.t = p, None
        else:
            self.q, self.t = model.normalize(p)
        self.rbd = graph.decompose(self.q, td)
        self.sets = sketch.enumerate_all(self.q, self.eps)
        self.outcome = dp.run_dp(self.q, self.rbd, self.eps, self.sets)
        self.cert = None
        self.report = None
        if self.outcome.feasible:
            self.cert = dp.extract_certificate(self.q, self.rbd, self.outcome, self.sets)
            self.report = verify.check_solution(self.q, self.cert.x, self.cert.z, self.eps)

    def oracle(self):
        origin = model.zero_image(self.t) if self.t is not None else None
        return verify.oracle_solve(self.q, origin=origin)


# -- reference answers -------------------------------------------------------------

def subset_sum(a, a0) -> bool:
    return any(sum(c) == a0 for r in range(1, len(a) + 1) for c in itertools.combinations(a, r))


def exact_subset_sum(a, a0, N) -> bool:
    return any(sum(c) == a0 for c in itertools.combinations(a, N))


def banded_brute(Q, c, d) -> float:
    """Least ``d'z + c'x + x'Qx`` over all supports, each minimized in
    closed form (``x`` free on the support)."""
    n = len(c)
    best = 0.0
    for r in range(1, n + 1):
        for S in itertools.combinations(range(n), r):
            S = list(S)
            val = float(d[S].sum() - 0.25 * c[S] @ np.linalg.solve(Q[np.ix_(S, S)], c[S]))
            best = min(best, val)
    return best


def portfolio_brute(data: gen.PortfolioData) -> float:
    """Least mean-variance objective over all supports of size at most N,
    each a convex QP handed to an external conic solver."""
    import cvxpy as cp
    lam, V, dd, mu, A, b, u = data.arrays()
    cov = V.T @ np.diag(lam) @ V + np.diag(dd)
    n = data.n
    best = math.inf
    for z in itertools.product((0, 1), repeat=n):
        if sum(z) > data.N:
            continue
        x = cp.Variable(n)
        cons = [x >= 0, x <= u * np.array(z)]
        if A.shape[0]:
            cons.append(A @ x <= b)
        prob = cp.Problem(cp.Minimize(cp.quad_form(x, cp.psd_wrap(cov)) - mu @ x), cons)
        prob.solve(solver="CLARABEL", tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
        if prob.status == "optimal":
            best = min(best, float(prob.value))
    return best


# -- QCQP reference: augmented Lagrangian around spectral projected gradient -------

def _pieces(q: qcqp.BlockQcqp):
    n = q.dim
    Q0 = np.zeros((n, n)) if q.Q is None else np.asarray(q.Q, float)
    d0 = np.zeros(n) if q.d is None else np.asarray(q.d, float)
    obj = (Q0 + np.diag(d0), np.asarray(q.c, float), float(q.const))
    ineq, eq = [], []
    for con in q.constraints:
        P = (np.zeros((n, n)) if con.Q is None else np.asarray(con.Q, float)) \
            + np.diag(np.zeros(n) if con.d is None else np.asarray(con.d, float))
        (eq if con.sense == "=" else ineq).append((P, np.asarray(con.c, float), float(con.rhs)))
    for row in q.rows:
        a = np.asarray(row.a, float)
        if row.lower == row.upper:
            eq.append((np.zeros((n, n)), a, float(row.upper)))
            continue
        if math.isfinite(row.upper):
            ineq.append((np.zeros((n, n)), a, float(row.upper)))
        if math.isfinite(row.lower):
            ineq.append((np.zeros((n, n)), -a, -float(row.lower)))
    lo = np.zeros(n) if q.lower is None else np.asarray(q.lower, float)
    hi = np.ones(n) if q.upper is None else np.asarray(q.upper, float)
    return obj, ineq, eq, lo, hi


def _spg(fun, grad, x, lo, hi, iters: int, tol: float):
    """Nonmonotone spectral projected gradient with backtracking."""
    proj = lambda y: np.clip(y, lo, hi)
    x = proj(x)
    f, g = fun(x), grad(x)
    step = 1.0
    hist = [f]
    for _ in range(iters):
        pg = proj(x - g) - x
        if np.max(np.abs(pg), initial=0.0) < tol:
            break
        dirn = proj(x - step * g) - x
        fref = max(hist[-10:])
        t = 1.0
        while True:
            xn = x + t * dirn
            fn = fun(xn)
            if fn <= fref + 1e-4 * t * (g @ dirn) or t < 1e-20:
                break
            t *= 0.5
        gn = grad(xn)
        s, y = xn - x, gn - g
        sy = s @ y
        step = float(np.clip((s @ s) / sy, 1e-12, 1e12)) if sy > 0 else 1e12
        x, f, g = xn, fn, gn
        hist.append(f)
    return x


def pg_reference(q: qcqp.BlockQcqp, outer: int = 60, inner: int = 5000) -> tuple[float, float, np.ndarray]:
    """(value, max violation, x) by the method of multipliers with box
    projected-gradient inner solves. Independent of the barrier solver."""
    (P0, c0, k0), ineq, eq, lo, hi = _pieces(q)
    n = len(lo)
    rows = ineq + eq
    m_in = len(ineq)
    P = np.array([r[0] for r in rows]).reshape(len(rows), n, n)
    C = np.array([r[1] for r in rows]).reshape(len(rows), n)
    B = np.array([r[2] for r in rows])
    is_eq = np.arange(len(rows)) >= m_in

    def resid(x):
        return np.einsum("i,kij,j->k", x, P, x) + C @ x - B

    def shifted(x, mult, rho):
        r = mult + rho * resid(x)
        return np.where(is_eq, r, np.maximum(r, 0.0))

    mult = np.zeros(len(rows))
    rho = 10.0
    x = 0.5 * (lo + hi)
    viol_prev = math.inf

    def violation(x):
        r = resid(x)
        return float(np.max(np.where(is_eq, np.abs(r), r), initial=0.0))

    for _ in range(outer):
        def fun(x, mult=mult, rho=rho):
            r = resid(x)
            s = mult + rho * r
            pen = np.where(is_eq, mult * r + 0.5 * rho * r * r, (np.maximum(s, 0.0) ** 2 - mult ** 2) / (2 * rho))
            return float(x @ P0 @ x + c0 @ x + k0 + pen.sum())

        def grad(x, mult=mult, rho=rho):
            w = shifted(x, mult, rho)
            return 2 * P0 @ x + c0 + 2 * np.einsum("k,kij,j->i", w, P, x) + w @ C

        x = _spg(fun, grad, x, lo, hi, inner, 1e-10)
        mult = shifted(x, mult, rho)
        viol = violation(x)
        if viol < 1e-10:
            break
        if viol > 0.25 * viol_prev:
            rho = min(rho * 5, 1e9)
        viol_prev = viol
    return float(x @ P0 @ x + c0 @ x + k0), violation(x), x


def random_block_qcqp(rng: np.random.Generator, dim: int | None = None, n_cons: int | None = None,
                      eq_prob: float = 0.2) -> qcqp.BlockQcqp:
    """Random convex block problem with a strictly feasible point."""
    n = int(rng.integers(1, 7)) if dim is None else dim
    m = int(rng.integers(0, 5)) if n_cons is None else n_cons

    def psd():
        r = int(rng.integers(1, n + 1))
        M = rng.normal(size=(n, r))
        return M @ M.T / r

    x0 = rng.uniform(0.1, 0.9, n)
    cons, rows = [], []
    for _ in range(m):
        if rng.random() < eq_prob:
            a = rng.normal(size=n)
            rows.append(qcqp.LinearRow(a, float(a @ x0), float(a @ x0)))
            continue
        P = psd() if rng.random() < 0.7 else None
        c = rng.normal(size=n)
        val = float(c @ x0 + (x0 @ P @ x0 if P is not None else 0.0))
        cons.append(qcqp.QcqpConstraint(c, val + rng.uniform(0.0, 0.5), P))
    return qcqp.BlockQcqp(rng.normal(size=n), psd() if rng.random() < 0.8 else None,
                          rng.uniform(0, 0.5, n) * (rng.random(n) < 0.3), 0.0, cons, rows,
                          np.zeros(n), np.ones(n))
