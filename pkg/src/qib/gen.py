"""Instance generators: hardness gadgets, portfolio and banded
reformulations, truss-style equality systems and random test instances.

Generators return problems in their natural coordinates (arbitrary finite
bounds); :func:`qib.model.normalize` brings them to unit boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import TreeDecomposition
from .model import (COMBINATORIAL, EQ, LE, MIXED, Block, Constraint, Problem, QuadForm, Variable,
                    linear_form, validate_problem)


class InvalidData(ValueError):
    pass


class NotPositiveDefinite(ValueError):
    pass


def _singletons(lower: Sequence[float], upper: Sequence[float]):
    variables = tuple(Variable(j, float(lo), float(hi), j) for j, (lo, hi) in enumerate(zip(lower, upper)))
    return variables, tuple(Block(j, (j,)) for j in range(len(variables)))


def _cardinality(n: int, n_blocks: int, members: Sequence[int], cap: int, name: str) -> Constraint:
    return Constraint(COMBINATORIAL, linear_form(n, n_blocks, indicator=[(i, 1.0) for i in members]),
                      LE, float(cap), name)


def _path_decomposition(bags: Sequence[set[int]]) -> TreeDecomposition:
    return TreeDecomposition({t: frozenset(b) for t, b in enumerate(bags)},
                             tuple((t, t + 1) for t in range(len(bags) - 1)))


# -- subset sum gadgets ---------------------------------------------------------

@dataclass
class SubsetSumData:
    a0: int
    a: Sequence[int]
    N: int | None = None

    def check(self, need_n: bool = False) -> None:
        a = list(self.a)
        if not a:
            raise InvalidData("need at least one item")
        if any(int(v) != v or v <= 1 for v in a):
            raise InvalidData("items must be integers greater than 1")
        if int(self.a0) != self.a0 or self.a0 <= 0:
            raise InvalidData("target must be a positive integer")
        if need_n and (self.N is None or not 0 <= self.N <= len(a)):
            raise InvalidData("cardinality must lie in [0, n]")


def gen_subsetsum_w3(d: SubsetSumData) -> Problem:
    """Equality system whose feasibility encodes the subset-sum instance.

    Per item ``j`` five singleton blocks ``s1, s2, t1, t2, x`` (variable
    ``5j + 0..4``) and rows ``s1 + s2 = 1``, ``s1 - (a-1) s2 + x = 2``,
    ``t1 + t2 = 1``, ``t1 - (a-1) t2 + x = 2``; then ``sum x = n + a0`` and at
    most ``3n`` nonzero variables.
    """
    d.check()
    a = [int(v) for v in d.a]
    n = len(a)
    nv = 5 * n
    lower = [0.0] * nv
    upper = []
    for aj in a:
        upper += [1.0, 1.0, 1.0, 1.0, float(aj + 1)]
    variables, blocks = _singletons(lower, upper)
    rows = []
    for j, aj in enumerate(a):
        s1, s2, t1, t2, x = range(5 * j, 5 * j + 5)
        rows.append(Constraint(MIXED, linear_form(nv, nv, [(s1, 1.0), (s2, 1.0)]), EQ, 1.0, f"s[{j}]"))
        rows.append(Constraint(MIXED, linear_form(nv, nv, [(s1, 1.0), (s2, -(aj - 1.0)), (x, 1.0)]), EQ, 2.0,
                               f"s_link[{j}]"))
        rows.append(Constraint(MIXED, linear_form(nv, nv, [(t1, 1.0), (t2, 1.0)]), EQ, 1.0, f"t[{j}]"))
        rows.append(Constraint(MIXED, linear_form(nv, nv, [(t1, 1.0), (t2, -(aj - 1.0)), (x, 1.0)]), EQ, 2.0,
                               f"t_link[{j}]"))
    rows.append(Constraint(MIXED, linear_form(nv, nv, [(5 * j + 4, 1.0) for j in range(n)]), EQ,
                           float(n + d.a0), "xsum"))
    rows.append(_cardinality(nv, nv, range(nv), 3 * n, "card"))
    return validate_problem(Problem(variables, blocks, QuadForm.zeros(nv, nv), tuple(rows), "w3"))


def w3_decomposition(n: int) -> TreeDecomposition:
    """Width-2 decomposition of the w3 rows without the cardinality row:
    a path of ``{s_link_j, t_link_j, xsum}`` bags, each with two pendant
    bags ``{s_j, s_link_j}`` and ``{t_j, t_link_j}``."""
    xsum = 4 * n
    bags, edges = {}, []
    for j in range(n):
        s_row, s_link, t_row, t_link = 4 * j, 4 * j + 1, 4 * j + 2, 4 * j + 3
        hub, left, right = 3 * j, 3 * j + 1, 3 * j + 2
        bags[hub] = frozenset({s_link, t_link, xsum})
        bags[left] = frozenset({s_row, s_link})
        bags[right] = frozenset({t_row, t_link})
        edges += [(hub, left), (hub, right)]
        if j:
            edges.append((3 * (j - 1), hub))
    return TreeDecomposition(bags, tuple(sorted(edges)))


def gen_2row(d: SubsetSumData, dvec: Sequence[float] | None = None) -> Problem:
    """``min sum d_j x_j^2`` s.t. ``sum x = N``, ``sum a_j x_j = a0``, at most
    ``N`` nonzeros, ``x`` in ``[0, 1]``."""
    d.check(need_n=True)
    a = [float(v) for v in d.a]
    n = len(a)
    w = np.ones(n) if dvec is None else np.asarray(dvec, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise InvalidData("weights must be n nonnegative numbers")
    variables, blocks = _singletons([0.0] * n, [1.0] * n)
    obj = QuadForm({}, w, np.zeros(n), np.zeros(n))
    rows = (Constraint(MIXED, linear_form(n, n, [(j, 1.0) for j in range(n)]), EQ, float(d.N), "count"),
            Constraint(MIXED, linear_form(n, n, list(enumerate(a))), EQ, float(d.a0), "sum"),
            _cardinality(n, n, range(n), int(d.N), "card"))
    return validate_problem(Problem(variables, blocks, obj, rows, "2row"))


# -- portfolio ------------------------------------------------------------------

@dataclass
class PortfolioData:
    lambdas: Sequence[float]
    vectors: np.ndarray
    d: Sequence[float]
    mu: Sequence[float]
    A: np.ndarray
    b: Sequence[float]
    u: Sequence[float]
    N: int
    # long-short extras
    u_minus: Sequence[float] | None = None
    A_minus: np.ndarray | None = None
    N_plus: int | None = None
    N_minus: int | None = None

    @property
    def n(self) -> int:
        return len(self.mu)

    def arrays(self):
        n = self.n
        lam = np.asarray(self.lambdas, dtype=float).reshape(-1)
        V = np.asarray(self.vectors, dtype=float).reshape(len(lam), n)
        A = np.asarray(self.A, dtype=float).reshape(-1, n)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        dd = np.asarray(self.d, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if np.any(lam <= 0):
            raise InvalidData("eigenvalues must be positive")
        if np.any(dd < 0):
            raise InvalidData("diagonal terms must be nonnegative")
        if len(b) != A.shape[0] or dd.shape != (n,) or u.shape != (n,):
            raise InvalidData("inconsistent portfolio dimensions")
        if np.any(u < 0) or not np.all(np.isfinite(u)):
            raise InvalidData("upper bounds must be finite and nonnegative")
        if not 0 <= self.N:
            raise InvalidData("cardinality must be nonnegative")
        return lam, V, dd, mu, A, b, u

    def covariance(self) -> np.ndarray:
        lam, V, dd, *_ = self.arrays()
        return V.T @ np.diag(lam) @ V + np.diag(dd)


def gen_portfolio(d: PortfolioData) -> Problem:
    """Blocks ``x_0..x_{n-1}`` then ``y_0..y_{H-1}``; rows ``A x <= b``, then
    ``v_h'x - y_h = 0``, then the cardinality row over the ``x`` blocks."""
    lam, V, dd, mu, A, b, u = d.arrays()
    n, H = d.n, len(lam)
    ybound = np.abs(V) @ u
    nv = n + H
    variables, blocks = _singletons([0.0] * n + list(-ybound), list(u) + list(ybound))
    obj = QuadForm({}, np.concatenate([dd, lam]), np.concatenate([-mu, np.zeros(H)]), np.zeros(nv))
    rows = []
    for r in range(A.shape[0]):
        rows.append(Constraint(MIXED, linear_form(nv, nv, [(j, A[r, j]) for j in range(n) if A[r, j]]), LE,
                               float(b[r]), f"A[{r}]"))
    for h in range(H):
        rows.append(Constraint(MIXED, linear_form(nv, nv, [(j, V[h, j]) for j in range(n) if V[h, j]]
                                                  + [(n + h, -1.0)]), EQ, 0.0, f"eigen[{h}]"))
    rows.append(_cardinality(nv, nv, range(n), int(d.N), "card"))
    return validate_problem(Problem(variables, blocks, obj, tuple(rows), "portfolio"))


def gen_portfolio_longshort(d: PortfolioData) -> Problem:
    """Blocks ``x+_j`` (``0..n-1``), ``x-_j`` (``n..2n-1``), ``y_h``; rows
    ``A+ x+ + A- x- <= b``, eigen rows on ``x+ - x-``, ``z+_j + z-_j <= 1``
    and three cardinality rows (long, short, total)."""
    lam, V, dd, mu, A, b, u = d.arrays()
    n, H = d.n, len(lam)
    um = np.asarray(d.u if d.u_minus is None else d.u_minus, dtype=float)
    Am = -A if d.A_minus is None else np.asarray(d.A_minus, dtype=float).reshape(A.shape)
    if um.shape != (n,) or np.any(um < 0):
        raise InvalidData("short bounds must be n nonnegative numbers")
    n_plus = d.N if d.N_plus is None else d.N_plus
    n_minus = d.N if d.N_minus is None else d.N_minus
    if min(n_plus, n_minus, d.N) < 0:
        raise InvalidData("cardinalities must be nonnegative")
    ybound = np.abs(V) @ np.maximum(u, um)
    nv = 2 * n + H
    variables, blocks = _singletons([0.0] * (2 * n) + list(-ybound), list(u) + list(um) + list(ybound))
    obj = QuadForm({}, np.concatenate([dd, dd, lam]), np.concatenate([-mu, mu, np.zeros(H)]), np.zeros(nv))
    rows = []
    for r in range(A.shape[0]):
        terms = [(j, A[r, j]) for j in range(n) if A[r, j]] + [(n + j, Am[r, j]) for j in range(n) if Am[r, j]]
        rows.append(Constraint(MIXED, linear_form(nv, nv, terms), LE, float(b[r]), f"A[{r}]"))
    for h in range(H):
        terms = ([(j, V[h, j]) for j in range(n) if V[h, j]] + [(n + j, -V[h, j]) for j in range(n) if V[h, j]]
                 + [(2 * n + h, -1.0)])
        rows.append(Constraint(MIXED, linear_form(nv, nv, terms), EQ, 0.0, f"eigen[{h}]"))
    for j in range(n):
        rows.append(Constraint(COMBINATORIAL, linear_form(nv, nv, indicator=[(j, 1.0), (n + j, 1.0)]), LE, 1.0,
                               f"ortho[{j}]"))
    rows.append(_cardinality(nv, nv, range(n), int(n_plus), "card+"))
    rows.append(_cardinality(nv, nv, range(n, 2 * n), int(n_minus), "card-"))
    rows.append(_cardinality(nv, nv, range(2 * n), int(d.N), "card"))
    return validate_problem(Problem(variables, blocks, obj, tuple(rows), "longshort"))


# -- banded -----------------------------------------------------------------------

def bandwidth(Q: np.ndarray) -> int:
    nz = np.argwhere(np.asarray(Q) != 0)
    return int(np.max(np.abs(nz[:, 0] - nz[:, 1]))) if len(nz) else 0


def ldl_banded(Q, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``Q = L diag(D) L'`` with ``L`` unit lower triangular of the same
    bandwidth; work is ``O(n k^2)``."""
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    if Q.shape != (n, n) or not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max(initial=0))):
        raise NotPositiveDefinite("matrix must be square and symmetric")
    k = bandwidth(Q) if k is None else k
    L = np.eye(n)
    D = np.zeros(n)
    for j in range(n):
        lo = max(0, j - k)
        D[j] = Q[j, j] - float(np.sum(L[j, lo:j] ** 2 * D[lo:j]))
        if not D[j] > 0:
            raise NotPositiveDefinite(f"pivot {j} is {D[j]:.3g}")
        for i in range(j + 1, min(n, j + k + 1)):
            lo_i = max(0, i - k)
            s = float(np.sum(L[i, lo_i:j] * L[j, lo_i:j] * D[lo_i:j]))
            L[i, j] = (Q[i, j] - s) / D[j]
    return L, np.diag(D)


@dataclass
class BandedData:
    Q: np.ndarray
    c: Sequence[float]
    d: Sequence[float]
    k: int | None = None

    def arrays(self):
        Q = np.asarray(self.Q, dtype=float)
        n = Q.shape[0]
        c = np.asarray(self.c, dtype=float)
        dd = np.asarray(self.d, dtype=float)
        if c.shape != (n,) or dd.shape != (n,):
            raise InvalidData("c and d must have length n")
        k = bandwidth(Q) if self.k is None else int(self.k)
        if bandwidth(Q) > k:
            raise InvalidData(f"matrix bandwidth {bandwidth(Q)} exceeds {k}")
        return Q, c, dd, k


def banded_radius(Q, c, d, upper_bound: float = 0.0) -> float:
    """Radius containing every ``x`` with ``d'z + c'x + x'Qx <= upper_bound``."""
    lam = float(np.linalg.eigvalsh(Q).min())
    if lam <= 0:
        raise NotPositiveDefinite("matrix is not positive definite")
    cn = float(np.linalg.norm(c))
    slack = upper_bound - float(np.minimum(d, 0).sum())
    return (cn + math.sqrt(cn * cn + 4 * lam * slack)) / (2 * lam)


def gen_banded(data: BandedData) -> Problem:
    """Blocks ``x_0..x_{n-1}`` then ``w_0..w_{n-1}`` with ``w = L'x`` where
    ``Q = L D L'``; objective ``d'z_x + c'x + sum D_j w_j^2``. Row ``j`` is
    ``x_j + sum_{i>j} L_ij x_i - w_j = 0``."""
    Q, c, dd, k = data.arrays()
    n = Q.shape[0]
    L, D = ldl_banded(Q, k)
    radius = banded_radius(Q, c, dd, 0.0)
    wbound = np.abs(L).sum(axis=0) * radius
    nv = 2 * n
    variables, blocks = _singletons([-radius] * n + list(-wbound), [radius] * n + list(wbound))
    obj = QuadForm({}, np.concatenate([np.zeros(n), np.diag(D)]), np.concatenate([c, np.zeros(n)]),
                   np.concatenate([dd, np.zeros(n)]))
    rows = []
    for j in range(n):
        terms = [(i, L[i, j]) for i in range(j, min(n, j + k + 1)) if L[i, j]] + [(n + j, -1.0)]
        rows.append(Constraint(MIXED, linear_form(nv, nv, terms), EQ, 0.0, f"ldl[{j}]"))
    return validate_problem(Problem(variables, blocks, obj, tuple(rows), "banded"))


def banded_decomposition(n: int, k: int) -> TreeDecomposition:
    """Path of bags of ``k + 1`` consecutive rows (the whole row set when
    ``n <= k + 1``)."""
    if n <= k + 1:
        return _path_decomposition([set(range(n))])
    return _path_decomposition([set(range(j, j + k + 1)) for j in range(n - k)])


def banded_objective(Q, c, d, x, z) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.dot(d, z) + np.dot(c, x) + x @ Q @ x)


# -- truss --------------------------------------------------------------------------

def gen_truss(A, b, blocks: Sequence[Sequence[int]], N: int, bounds) -> Problem:
    """``min sum x_j^2`` s.t. ``A x = b``, at most ``N`` blocks on."""
    A = np.asarray(A, dtype=float)
    A = A.reshape(-1, A.shape[-1]) if A.ndim else A.reshape(1, 1)
    bvec = np.asarray(b, dtype=float).reshape(-1)
    n = A.shape[1]
    lower, upper = (np.asarray(v, dtype=float) for v in bounds)
    if lower.shape != (n,) or upper.shape != (n,) or len(bvec) != A.shape[0]:
        raise InvalidData("inconsistent truss dimensions")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise InvalidData("truss bounds must be finite")
    owner = [-1] * n
    for i, blk in enumerate(blocks):
        for j in blk:
            if not 0 <= j < n or owner[j] != -1:
                raise InvalidData("blocks must partition the variables")
            owner[j] = i
    if -1 in owner:
        raise InvalidData("blocks must partition the variables")
    nb = len(blocks)
    variables = tuple(Variable(j, float(lower[j]), float(upper[j]), owner[j]) for j in range(n))
    blks = tuple(Block(i, tuple(int(j) for j in blk)) for i, blk in enumerate(blocks))
    obj = QuadForm({}, np.ones(n), np.zeros(n), np.zeros(nb))
    rows = [Constraint(MIXED, linear_form(n, nb, [(j, A[r, j]) for j in range(n) if A[r, j]]), EQ,
                       float(bvec[r]), f"row[{r}]") for r in range(A.shape[0])]
    rows.append(_cardinality(n, nb, range(nb), int(N), "card"))
    return validate_problem(Problem(variables, blks, obj, tuple(rows), "truss"))


# -- random instances -----------------------------------------------------------------

def _random_psd(rng: np.random.Generator, size: int, rank: int | None = None) -> np.ndarray:
    rank = size if rank is None else rank
    M = rng.normal(size=(size, rank))
    return M @ M.T / max(rank, 1)


def gen_random(rng: np.random.Generator, n_blocks: int, block_sizes: Sequence[int], n_mixed: int,
               n_comb: int, support: int = 2, eq_prob: float = 0.0) -> Problem:
    """Random instance on unit boxes.

    Mixed rows touch ``support`` random blocks with PSD block matrices,
    diagonal, linear and indicator terms; right-hand sides are drawn around
    the row value at a random point so that most instances are feasible.
    Combinatorial rows have random {-1, 1} coefficients on up to
    ``support + 1`` blocks.
    """
    sizes = list(block_sizes)
    n = sum(sizes)
    variables, blocks, start = [], [], 0
    for i, s in enumerate(sizes):
        blocks.append(Block(i, tuple(range(start, start + s))))
        variables += [Variable(j, 0.0, 1.0, i) for j in range(start, start + s)]
        start += s

    def form(touch, quad_prob, ind_scale):
        quad, diag, lin, ind = {}, np.zeros(n), np.zeros(n), np.zeros(n_blocks)
        for i in touch:
            ix = list(blocks[i].variables)
            if rng.random() < quad_prob:
                quad[i] = _random_psd(rng, len(ix), rng.integers(1, len(ix) + 1)) * rng.uniform(0.2, 1.0)
            diag[ix] = rng.uniform(0, 0.5, len(ix)) * (rng.random(len(ix)) < 0.3)
            lin[ix] = rng.normal(size=len(ix))
            ind[i] = rng.normal() * ind_scale
        return QuadForm(quad, diag, lin, ind)

    obj = form(range(n_blocks), 0.7, 0.5)
    x0 = rng.random(n)
    z0 = (rng.random(n_blocks) < 0.7).astype(float)
    for b in blocks:
        if not z0[b.id]:
            x0[list(b.variables)] = 0.0
    rows = []
    for _ in range(n_mixed):
        touch = sorted(rng.choice(n_blocks, size=min(support, n_blocks), replace=False))
        eq = rng.random() < eq_prob
        f = form(touch, 0.0 if eq else 0.6, 0.3)
        if eq:
            f = QuadForm({}, np.zeros(n), f.linear, f.indicator)
        val = f.evaluate(blocks, x0, z0)
        rhs = val if eq else val + rng.uniform(-0.2, 0.3) * max(f.norm1(), 1e-9)
        rows.append(Constraint(MIXED, f, EQ if eq else LE, float(rhs)))
    for _ in range(n_comb):
        touch = rng.choice(n_blocks, size=min(support + 1, n_blocks), replace=False)
        v = np.zeros(n_blocks)
        v[touch] = rng.choice([-1.0, 1.0], size=len(touch))
        rhs = int(np.floor(v @ z0)) + int(rng.integers(-1, 2))
        rows.append(Constraint(COMBINATORIAL, QuadForm({}, np.zeros(n), np.zeros(n), v), LE, float(rhs)))
    return validate_problem(Problem(tuple(variables), tuple(blocks), obj, tuple(rows), "random"))
