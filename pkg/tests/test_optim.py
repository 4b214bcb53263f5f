import itertools

import numpy as np
import pytest

from ivrt.errors import InfeasibleError
from ivrt.optim import (
    LpProblem,
    QpProblem,
    fixed_point,
    lp_solve,
    psd_repair,
    scan_fixed_points,
    simplex_qp,
    spd_solve,
)
from tests.conftest import rand_pd


def simplex_grid(L, step):
    ticks = int(round(1.0 / step))
    if L == 2:
        w = np.arange(ticks + 1) / ticks
        return np.column_stack([w, 1 - w])
    pts = []
    for i in range(ticks + 1):
        for j in range(ticks + 1 - i):
            pts.append((i / ticks, j / ticks, 1 - (i + j) / ticks))
    return np.array(pts)


class TestSimplexQp:
    def test_identity_symmetric(self):
        x, val, _ = simplex_qp(QpProblem(np.eye(3)))
        assert np.allclose(x, 1 / 3)
        assert val == pytest.approx(1 / 3)

    def test_diag_1_4(self):
        x, val, _ = simplex_qp(QpProblem(np.diag([1.0, 4.0])))
        assert np.allclose(x, [0.8, 0.2], atol=1e-10)
        assert val == pytest.approx(0.8)

    def test_grid_oracle(self, rng):
        grid = simplex_grid(3, 1e-2)
        for _ in range(50):
            Q = rand_pd(rng, 3)
            c = rng.normal(size=3)
            x, val, _ = simplex_qp(QpProblem(Q, c))
            grid_vals = np.einsum("ij,jk,ik->i", grid, Q, grid) + grid @ c
            assert val <= grid_vals.min() + 1e-5
            assert abs(x.sum() - 1) < 1e-12 and x.min() > -1e-12

    def test_extra_equality(self, rng):
        Q = rand_pd(rng, 4)
        a = np.array([1.0, 2.0, 3.0, 4.0])
        x, val, _ = simplex_qp(QpProblem(Q, extra_eq=(a, np.array([2.5]))))
        assert a @ x == pytest.approx(2.5, abs=1e-9)
        # Dropping the constraint can only improve the value.
        _, free_val, _ = simplex_qp(QpProblem(Q))
        assert free_val <= val + 1e-10

    def test_infeasible_extra_equality(self, rng):
        Q = rand_pd(rng, 3)
        with pytest.raises(InfeasibleError):
            simplex_qp(QpProblem(Q, extra_eq=(np.array([1.0, 2.0, 3.0]), np.array([9.0]))))

    def test_kkt_gradient_structure(self, rng):
        for _ in range(20):
            Q = rand_pd(rng, 4)
            c = rng.normal(size=4)
            x, _, support = simplex_qp(QpProblem(Q, c))
            g = 2 * Q @ x + c
            if support:
                level = np.mean(g[support])
                assert np.allclose(g[support], level, atol=1e-7)
                off = [i for i in range(4) if i not in support]
                assert all(g[i] >= level - 1e-7 for i in off)

    def test_degenerate_q_nullspace(self):
        # Rank-1 Q along (1,1): objective constant on the simplex line.
        Q = np.ones((2, 2))
        x, val, _ = simplex_qp(QpProblem(Q))
        assert val == pytest.approx(1.0)


def _vertex_oracle(c, a_ub, b_ub, n):
    """Enumerate candidate vertices of {x >= 0, A x <= b} in R^n."""
    A = np.vstack([a_ub, -np.eye(n)])
    b = np.concatenate([b_ub, np.zeros(n)])
    best = np.inf
    for rows in itertools.combinations(range(A.shape[0]), n):
        sub = A[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, b[list(rows)])
        if np.all(A @ x <= b + 1e-8):
            best = min(best, c @ x)
    return best


class TestLpSolve:
    def test_scalar_bound(self):
        res = lp_solve(LpProblem(c=np.array([1.0]), lo=np.array([1.0])))
        assert res.status == "optimal"
        assert res.value == pytest.approx(1.0)

    def test_infeasible(self):
        res = lp_solve(LpProblem(c=np.array([1.0]),
                                 a_ub=np.array([[1.0]]), b_ub=np.array([0.0]),
                                 lo=np.array([1.0])))
        assert res.status == "infeasible"

    def test_unbounded(self):
        res = lp_solve(LpProblem(c=np.array([-1.0])))
        assert res.status == "unbounded"

    def test_vertex_enumeration_oracle(self, rng):
        for _ in range(40):
            n = int(rng.integers(2, 5))
            m = int(rng.integers(2, 6))
            a_ub = rng.normal(size=(m, n))
            b_ub = rng.uniform(0.5, 2.0, size=m)  # x = 0 always feasible
            c = rng.normal(size=n)
            res = lp_solve(LpProblem(c=c, a_ub=a_ub, b_ub=b_ub))
            oracle = _vertex_oracle(c, a_ub, b_ub, n)
            if not np.isfinite(oracle):
                continue
            if res.status == "optimal":
                assert res.value == pytest.approx(oracle, abs=1e-7)
                assert np.all(a_ub @ res.x <= b_ub + 1e-8)
                assert np.all(res.x >= -1e-9)

    def test_equality_constraints(self):
        res = lp_solve(LpProblem(c=np.array([1.0, 2.0]),
                                 a_eq=np.array([[1.0, 1.0]]), b_eq=np.array([1.0])))
        assert res.status == "optimal"
        assert np.allclose(res.x, [1.0, 0.0], atol=1e-9)

    def test_upper_bounds(self):
        res = lp_solve(LpProblem(c=np.array([-1.0, -1.0]),
                                 a_ub=np.array([[1.0, 1.0]]), b_ub=np.array([3.0]),
                                 hi=np.array([1.0, 1.0])))
        assert res.value == pytest.approx(-2.0)

    def test_free_variable_split(self):
        res = lp_solve(LpProblem(c=np.array([1.0]),
                                 a_ub=np.array([[-1.0]]), b_ub=np.array([5.0]),
                                 lo=np.array([-np.inf])))
        assert res.value == pytest.approx(-5.0)

    def test_weak_duality_spot_check(self, rng):
        # For min c'x, Ax <= b, x >= 0: any y <= 0 with A'y <= c gives y'b <= c'x.
        for _ in range(10):
            n, m = 3, 4
            a_ub = rng.normal(size=(m, n))
            b_ub = rng.uniform(0.5, 2.0, size=m)
            c = np.abs(rng.normal(size=n)) + 0.1
            res = lp_solve(LpProblem(c=c, a_ub=a_ub, b_ub=b_ub))
            assert res.status == "optimal"
            y = np.zeros(m)  # trivially dual feasible since c > 0
            assert y @ b_ub <= res.value + 1e-9


class TestFixedPoint:
    def test_affine_contraction(self):
        x, _, resid, conv = fixed_point(lambda b: 0.5 * b + 1.0, 0.0)
        assert conv and x == pytest.approx(2.0) and resid <= 1e-9

    def test_damping_rescues_oscillator(self):
        f = lambda b: -b + 1.0  # undamped iteration 2-cycles
        x, _, _, conv = fixed_point(f, 0.0, max_iter=50)
        assert not conv
        x, _, resid, conv = fixed_point(f, 0.0, damping=0.5)
        assert conv and x == pytest.approx(0.5, abs=1e-8)

    def test_scan_finds_multiple_roots(self):
        f = lambda b: b + (b - 1) * (b - 2) * (b - 3)
        roots = scan_fixed_points(f, 0.0, 4.0)
        assert np.allclose(roots, [1.0, 2.0, 3.0], atol=1e-6)


class TestMatrixUtilities:
    def test_spd_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        assert np.allclose(spd_solve(np.eye(3), b), b)

    def test_hilbert_4x4(self):
        H = np.array([[1 / (i + j + 1) for j in range(4)] for i in range(4)])
        # Exact inverse of the 4x4 Hilbert matrix (integer entries).
        Hinv = np.array([
            [16, -120, 240, -140],
            [-120, 1200, -2700, 1680],
            [240, -2700, 6480, -4200],
            [-140, 1680, -4200, 2800],
        ], dtype=float)
        assert np.allclose(spd_solve(H, np.eye(4)), Hinv, rtol=1e-7)

    def test_round_trip(self, rng):
        A = rand_pd(rng, 5)
        B = rng.normal(size=(5, 3))
        assert np.allclose(A @ spd_solve(A, B), B, atol=1e-8)

    def test_psd_repair_clips(self):
        A = np.diag([1.0, -0.5])
        R, clip = psd_repair(A)
        assert clip == pytest.approx(0.5)
        assert np.linalg.eigvalsh(R).min() >= -1e-15
