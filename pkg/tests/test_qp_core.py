import itertools

import numpy as np
import pytest

from src.core.errors import QpError
from src.navigation.qp_core import QpProblem, QpStatus, kkt_residuals, solve


def brute_force_optimum(H, f, A, b):
    """列舉所有 active set，取可行 EQP 解中目標值最小者"""
    n, m = len(f), len(b)
    best_x, best_value = None, np.inf
    for size in range(0, min(n, m) + 1):
        for subset in itertools.combinations(range(m), size):
            C = A[list(subset)]
            K = np.block([[H, C.T], [C, np.zeros((size, size))]])
            rhs = np.concatenate((-f, b[list(subset)]))
            try:
                x = np.linalg.solve(K, rhs)[:n]
            except np.linalg.LinAlgError:
                continue
            if np.all(A @ x <= b + 1e-9):
                value = 0.5 * x @ H @ x + f @ x
                if value < best_value:
                    best_x, best_value = x, value
    return best_x, best_value


def random_feasible_problem(rng, n, m):
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    H = 0.5 * (H + H.T)
    f = rng.normal(size=n) * 3.0
    A = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    b = A @ x0 + rng.uniform(0.0, 1.0, size=m)
    return H, f, A, b


# ========================================
# 基本範例
# ========================================

def test_unconstrained_minimizer():
    solution = solve(QpProblem(H=np.eye(2), f=np.array([-1.0, 0.0])))
    assert solution.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(solution.x, (1.0, 0.0), atol=1e-12)


def test_single_halfspace_projection():
    problem = QpProblem(H=np.eye(2), f=np.array([-2.0, 0.0]), A=np.array([[1.0, 0.0]]), b=np.array([0.5]))
    solution = solve(problem)
    assert solution.optimal
    np.testing.assert_allclose(solution.x, (0.5, 0.0), atol=1e-10)
    assert solution.active_set == (0,)
    assert solution.multipliers[0] == pytest.approx(1.5)


def test_contradictory_constraints_are_infeasible():
    problem = QpProblem(H=np.eye(1), f=np.zeros(1), A=np.array([[1.0], [-1.0]]), b=np.array([-1.0, -1.0]))
    assert solve(problem).status is QpStatus.INFEASIBLE


def test_equality_constraint():
    problem = QpProblem(H=np.eye(2), f=np.zeros(2), Aeq=np.array([[1.0, 1.0]]), beq=np.array([1.0]))
    solution = solve(problem)
    np.testing.assert_allclose(solution.x, (0.5, 0.5), atol=1e-10)


def test_bounds():
    problem = QpProblem(H=np.eye(2), f=np.array([-2.0, -2.0]), upper=1.0, lower=-np.inf)
    solution = solve(problem)
    np.testing.assert_allclose(solution.x, (1.0, 1.0), atol=1e-10)


# ========================================
# 驗證
# ========================================

def test_dimension_mismatch():
    with pytest.raises(QpError):
        QpProblem(H=np.eye(3), f=np.zeros(2))
    with pytest.raises(QpError):
        QpProblem(H=np.eye(2), f=np.zeros(2), A=np.ones((2, 2)), b=np.ones(3))
    with pytest.raises(QpError):
        QpProblem(H=np.eye(2), f=np.zeros(2), A=np.ones((1, 2)))


def test_non_symmetric_hessian():
    with pytest.raises(QpError):
        QpProblem(H=np.array([[1.0, 1.0], [0.0, 1.0]]), f=np.zeros(2))


def test_indefinite_hessian():
    with pytest.raises(QpError):
        solve(QpProblem(H=np.diag([1.0, -1.0]), f=np.zeros(2)))


def test_warm_start_length_checked():
    with pytest.raises(QpError):
        solve(QpProblem(H=np.eye(2), f=np.zeros(2)), warm_start=np.zeros(3))


# ========================================
# 性質
# ========================================

def test_matches_brute_force_oracle():
    rng = np.random.default_rng(17)
    for _ in range(40):
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        H, f, A, b = random_feasible_problem(rng, n, m)
        solution = solve(QpProblem(H=H, f=f, A=A, b=b))
        _, best = brute_force_optimum(H, f, A, b)
        assert solution.optimal
        assert solution.objective == pytest.approx(best, abs=1e-7)
        assert np.all(A @ solution.x <= b + 1e-8)


def test_kkt_residuals_small_on_control_sized_problems():
    rng = np.random.default_rng(23)
    for _ in range(200):
        H, f, A, b = random_feasible_problem(rng, 2, int(rng.integers(1, 6)))
        problem = QpProblem(H=H, f=f, A=A, b=b, lower=-10.0, upper=10.0)
        solution = solve(problem)
        assert solution.optimal
        residuals = kkt_residuals(problem, solution)
        assert residuals["stationarity"] <= 1e-8
        assert residuals["primal"] <= 1e-8
        assert residuals["dual"] <= 1e-8
        assert residuals["complementarity"] <= 1e-8


def test_row_scaling_does_not_change_solution():
    rng = np.random.default_rng(29)
    for _ in range(20):
        H, f, A, b = random_feasible_problem(rng, 3, 5)
        scale = rng.uniform(0.1, 10.0, size=5)
        base = solve(QpProblem(H=H, f=f, A=A, b=b))
        scaled = solve(QpProblem(H=H, f=f, A=A * scale[:, None], b=b * scale))
        np.testing.assert_allclose(base.x, scaled.x, atol=1e-8)


def test_warm_start_reproduces_active_set():
    rng = np.random.default_rng(31)
    for _ in range(20):
        H, f, A, b = random_feasible_problem(rng, 3, 6)
        problem = QpProblem(H=H, f=f, A=A, b=b)
        cold = solve(problem)
        warm = solve(problem, warm_start=cold.x, working_set=cold.active_set)
        assert warm.active_set == cold.active_set
        np.testing.assert_allclose(warm.x, cold.x, atol=1e-9)
        assert warm.iterations <= cold.iterations
