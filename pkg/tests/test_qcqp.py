import math

import numpy as np
import pytest

from qib import qcqp
from qib.qcqp import BlockQcqp, LinearRow, QcqpConstraint

from support import pg_reference, random_block_qcqp


def unit_box(n, **kw):
    kw.setdefault("c", np.zeros(n))
    return BlockQcqp(lower=np.zeros(n), upper=np.ones(n), **kw)


def shifted_square():
    # (x - 1)^2 = x^2 - 2x + 1 subject to x^2 <= 1/4
    return unit_box(1, c=np.array([-2.0]), Q=np.eye(1), const=1.0,
                    constraints=[QcqpConstraint(np.zeros(1), 0.25, np.eye(1))])


def split_rows(n=1):
    e = np.eye(n)[0]
    return unit_box(n, rows=[LinearRow(e, upper=0.2), LinearRow(e, lower=0.8)])


class TestSolve:
    def test_square_at_origin(self):
        res = qcqp.solve(unit_box(1, Q=np.eye(1)))
        assert res.optimal
        assert res.x[0] == pytest.approx(0, abs=1e-8) and res.value == pytest.approx(0, abs=1e-8)

    def test_shifted_square_against_grid(self):
        res = qcqp.solve(shifted_square())
        grid = np.arange(0, 0.5 + 1e-7, 1e-6)
        assert res.optimal
        assert res.x[0] == pytest.approx(0.5, abs=1e-7)
        assert res.value == pytest.approx(float(np.min((grid - 1) ** 2)), abs=1e-7)
        assert res.value == pytest.approx(0.25, abs=1e-7)

    @pytest.mark.parametrize("n", [1, 2])
    def test_split_rows_infeasible(self, n):
        res = qcqp.solve(split_rows(n))
        assert res.status == "infeasible" and not res.optimal

    def test_inverted_row_infeasible(self):
        q = unit_box(1, rows=[LinearRow(np.ones(1), lower=0.8, upper=0.2)])
        assert qcqp.solve(q).status == "infeasible"

    def test_equality_row(self):
        # min |x|^2 on x1 + x2 = 1
        q = unit_box(2, Q=np.eye(2), rows=[LinearRow(np.ones(2), 1.0, 1.0)])
        res = qcqp.solve(q)
        assert res.x == pytest.approx([0.5, 0.5], abs=1e-7)
        assert res.value == pytest.approx(0.5, abs=1e-7)

    def test_empty_dimension(self):
        res = qcqp.solve(BlockQcqp(np.zeros(0), const=2.0))
        assert res.optimal and res.value == 2.0

    def test_point_stays_in_box(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            q = random_block_qcqp(rng)
            res = qcqp.solve(q)
            if res.optimal:
                assert np.all(res.x >= q.lower) and np.all(res.x <= q.upper)

    def test_optimal_results_meet_tolerances(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            res = qcqp.solve(random_block_qcqp(rng))
            assert res.optimal
            assert res.max_violation <= qcqp.FEAS_TOL
            assert res.kkt_residual <= qcqp.KKT_TOL

    def test_relaxing_rhs_never_hurts(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            q = random_block_qcqp(rng, eq_prob=0.0)
            if not q.constraints:
                continue
            tight = qcqp.solve(q)
            loose = qcqp.solve(BlockQcqp(q.c, q.Q, q.d, q.const,
                                         [QcqpConstraint(c.c, c.rhs + 0.1, c.Q, c.d) for c in q.constraints],
                                         q.rows, q.lower, q.upper))
            assert loose.value <= tight.value + qcqp.VAL_TOL

    def test_matches_projected_gradient(self):
        rng = np.random.default_rng(2024)
        for _ in range(8):
            q = random_block_qcqp(rng)
            res = qcqp.solve(q)
            ref, viol, _ = pg_reference(q)
            assert viol <= 1e-6
            assert res.value == pytest.approx(ref, abs=1e-5)


class TestPhase1:
    def test_feasible_nonpositive(self):
        _, t = qcqp.phase1(shifted_square())
        assert t <= 0

    @pytest.mark.parametrize("n", [1, 2])
    def test_split_rows_gap(self, n):
        x, t = qcqp.phase1(split_rows(n))
        assert t == pytest.approx(0.3, abs=1e-9)
        assert x[0] == pytest.approx(0.5, abs=1e-6)
        # grid check of the minimized maximum violation
        grid = np.linspace(0, 1, 100001)
        assert t == pytest.approx(float(np.min(np.maximum(grid - 0.2, 0.8 - grid))), abs=1e-5)

    @pytest.mark.parametrize("n", [1, 3])
    def test_no_constraints_is_box_center(self, n):
        x, t = qcqp.phase1(unit_box(n))
        assert t == 0.0
        assert x == pytest.approx(np.full(n, 0.5))


class TestKkt:
    def test_optimal_pair(self):
        q = unit_box(1, Q=np.eye(1))
        res = qcqp.solve(q)
        assert qcqp.kkt_residual(q, res.x, res.multipliers) <= 1e-8

    def test_perturbed_point(self):
        q = unit_box(1, Q=np.eye(1))
        res = qcqp.solve(q)
        assert qcqp.kkt_residual(q, res.x + 1e-2, res.multipliers) >= 1e-3

    def test_zero_problem(self):
        assert qcqp.kkt_residual(unit_box(2), np.array([0.3, 0.6]), {}) == 0.0

    def test_estimated_multipliers_certify(self):
        q = shifted_square()
        x = np.array([0.5])
        mult = qcqp.estimate_multipliers(q, x)
        # gradient of the objective is -1 and of the constraint is 1
        assert mult["quad"][0] == pytest.approx(1.0, abs=1e-9)
        assert qcqp.kkt_residual(q, x, mult) <= 1e-9
        assert math.isfinite(qcqp.kkt_residual(q, x, {}))
