"""
QP 求解模組
小型稠密凸二次規劃：min ½uᵀHu + fᵀu  s.t.  Au ≤ b, Aeq·u = beq, lo ≤ u ≤ hi

演算法為兩階段 primal active-set：
- 第一階段以彈性 slack 找可行點（加上極小的 proximal 項讓 Hessian 正定）
- 第二階段從可行點出發做標準 active-set 迭代
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import QpError

logger = logging.getLogger(__name__)

PSD_JITTER = 1e-10
SYMMETRY_TOLERANCE = 1e-9
PHASE_ONE_PROXIMAL = 1e-6


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    """
    QP 問題定義

    A/b、Aeq/beq、lower/upper 都可省略；bounds 中的 ±inf 不產生約束列。

    使用範例:
    ```python
    problem = QpProblem(H=np.eye(2), f=np.array([-2.0, 0.0]),
                        A=np.array([[1.0, 0.0]]), b=np.array([0.5]))
    solution = solve(problem)
    ```
    """
    H: np.ndarray
    f: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    Aeq: Optional[np.ndarray] = None
    beq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        if self.H.shape != (n, n):
            raise QpError(f"H 維度 {self.H.shape} 與 f 長度 {n} 不符")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > SYMMETRY_TOLERANCE:
            raise QpError("H 必須是對稱矩陣")

        self.A, self.b = self._pair(self.A, self.b, n, "A/b")
        self.Aeq, self.beq = self._pair(self.Aeq, self.beq, n, "Aeq/beq")
        for name in ("lower", "upper"):
            value = getattr(self, name)
            if value is not None:
                value = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
                setattr(self, name, value)

    @staticmethod
    def _pair(M, v, n: int, label: str) -> Tuple[np.ndarray, np.ndarray]:
        if M is None and v is None:
            return np.zeros((0, n)), np.zeros(0)
        if M is None or v is None:
            raise QpError(f"{label} 必須同時提供")
        M = np.asarray(M, dtype=float).reshape(-1, n) if np.size(M) else np.zeros((0, n))
        v = np.asarray(v, dtype=float).reshape(-1)
        if M.shape[0] != v.size:
            raise QpError(f"{label} 列數 {M.shape[0]} 與向量長度 {v.size} 不符")
        return M, v

    @property
    def n(self) -> int:
        return self.f.size

    def inequality_matrices(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        將 A/b 與 bounds 疊成 G·u ≤ h

        列順序：A 的列、有限 upper 的列、有限 lower 的列。
        """
        rows = [self.A]
        rhs = [self.b]
        eye = np.eye(self.n)
        if self.upper is not None:
            idx = np.flatnonzero(np.isfinite(self.upper))
            rows.append(eye[idx])
            rhs.append(self.upper[idx])
        if self.lower is not None:
            idx = np.flatnonzero(np.isfinite(self.lower))
            rows.append(-eye[idx])
            rhs.append(-self.lower[idx])
        return np.vstack(rows), np.concatenate(rhs)

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u)


@dataclass
class QpSolution:
    """QP 解：multipliers 對應 inequality_matrices() 的列順序"""
    x: np.ndarray
    status: QpStatus
    objective: float
    active_set: Tuple[int, ...] = ()
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


# ========================================
# 內部工具
# ========================================

def _check_psd(H: np.ndarray) -> None:
    try:
        np.linalg.cholesky(H + PSD_JITTER * np.eye(H.shape[0]))
    except np.linalg.LinAlgError as e:
        raise QpError("H 不是半正定矩陣") from e


def _solve_kkt(H: np.ndarray, C: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """求解 [[H, Cᵀ], [C, 0]]·[p; λ] = [−g; 0]"""
    n, k = H.shape[0], C.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate((-g, np.zeros(k)))
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _independent_subset(rows: Sequence[int], G: np.ndarray, E: np.ndarray) -> List[int]:
    """保留與等式約束及彼此線性獨立的工作集列"""
    kept: List[int] = []
    base = E
    for i in rows:
        candidate = np.vstack((base, G[i]))
        if np.linalg.matrix_rank(candidate) == candidate.shape[0]:
            kept.append(i)
            base = candidate
    return kept


def _active_set(
    H: np.ndarray,
    f: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    E: np.ndarray,
    x: np.ndarray,
    working: List[int],
    tol: float,
    max_iter: int,
):
    """
    從可行點 x 出發的 primal active-set 迭代

    Returns:
        (x, working, μ, ν, iterations, converged)
    """
    m, p_eq = G.shape[0], E.shape[0]
    working = list(working)

    for iteration in range(1, max_iter + 1):
        C = np.vstack((E, G[working])) if working else E
        g = H @ x + f
        step, lam = _solve_kkt(H, C, g)
        nu, mu_w = lam[:p_eq], lam[p_eq:]

        # ratio test：只看不在工作集、且沿 step 方向會增加的約束
        alpha, blocking = 1.0, None
        if m:
            Gp = G @ step
            candidates = Gp > tol * 1e-3
            candidates[working] = False
            if candidates.any():
                slack = np.maximum(h - G @ x, 0.0)
                ratios = np.full(m, np.inf)
                ratios[candidates] = slack[candidates] / Gp[candidates]
                i = int(np.argmin(ratios))
                if ratios[i] < alpha:
                    alpha, blocking = float(ratios[i]), i

        x = x + alpha * step
        if blocking is not None:
            working.append(blocking)
            continue

        # 完整步長：x 為目前工作集上的 EQP 最佳解，λ 為其乘子
        if mu_w.size == 0 or mu_w.min() >= -tol:
            mu = np.zeros(m)
            mu[working] = mu_w
            return x, working, mu, nu, iteration, True
        working.pop(int(np.argmin(mu_w)))

    mu = np.zeros(m)
    return x, working, mu, np.zeros(p_eq), max_iter, False


def _project_equalities(x: np.ndarray, E: np.ndarray, e: np.ndarray) -> np.ndarray:
    if E.shape[0] == 0:
        return x
    correction = np.linalg.lstsq(E, E @ x - e, rcond=None)[0]
    return x - correction


def _equality_minimizer(H: np.ndarray, f: np.ndarray, E: np.ndarray, e: np.ndarray) -> np.ndarray:
    x0 = _project_equalities(np.zeros(f.size), E, e)
    step, _ = _solve_kkt(H, E, H @ x0 + f)
    return x0 + step


# ========================================
# 求解
# ========================================

def solve(
    problem: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 200,
    warm_start: Optional[np.ndarray] = None,
    working_set: Optional[Sequence[int]] = None,
) -> QpSolution:
    """
    求解凸 QP

    Args:
        problem: QP 問題
        tol: 可行性、乘子與步長的容差
        max_iter: 第一階段與第二階段各自的迭代上限
        warm_start: 初始點（例如上一次重新規劃的解）
        working_set: 初始工作集（inequality_matrices() 的列索引）

    Returns:
        QpSolution；不可行時 x 為最小化最大違反量的點
    """
    H, f = problem.H, problem.f
    _check_psd(H)
    G, h = problem.inequality_matrices()
    E, e = problem.Aeq, problem.beq
    n, m = problem.n, G.shape[0]

    if warm_start is not None:
        x_ref = np.asarray(warm_start, dtype=float).reshape(-1)
        if x_ref.size != n:
            raise QpError(f"warm_start 長度 {x_ref.size} 與變數數 {n} 不符")
    else:
        x_ref = _equality_minimizer(H, f, E, e)

    x = _project_equalities(x_ref, E, e)
    if E.shape[0] and np.max(np.abs(E @ x - e)) > max(tol, 1e-9) * max(1.0, np.max(np.abs(e))):
        logger.debug("inconsistent equality constraints")
        return QpSolution(x=x, status=QpStatus.INFEASIBLE, objective=problem.objective(x))

    iterations = 0
    violation = np.max(G @ x - h, initial=0.0)
    if violation > tol:
        # 第一階段：變數 (x, t)，min t + δ/2(‖x − x_ref‖² + t²)
        H1 = PHASE_ONE_PROXIMAL * np.eye(n + 1)
        f1 = np.concatenate((-PHASE_ONE_PROXIMAL * x, [1.0]))
        G1 = np.vstack((np.hstack((G, -np.ones((m, 1)))), np.append(np.zeros(n), -1.0)))
        h1 = np.append(h, 0.0)
        E1 = np.hstack((E, np.zeros((E.shape[0], 1))))
        y0 = np.append(x, violation + 1.0)
        y, _, _, _, iterations, _ = _active_set(H1, f1, G1, h1, E1, y0, [], tol, max_iter)
        x, t = y[:n], y[n]
        if t > tol:
            logger.debug("QP infeasible, minimal violation %.3e", t)
            return QpSolution(x=x, status=QpStatus.INFEASIBLE, objective=problem.objective(x),
                              iterations=iterations)

    working: List[int] = []
    if working_set:
        active_now = [i for i in working_set if 0 <= i < m and abs(G[i] @ x - h[i]) <= tol]
        working = _independent_subset(active_now, G, E)

    x, working, mu, nu, more, converged = _active_set(H, f, G, h, E, x, working, tol, max_iter)
    iterations += more
    status = QpStatus.OPTIMAL if converged else QpStatus.MAX_ITER
    if not converged:
        logger.debug("QP hit max_iter=%d", max_iter)

    return QpSolution(
        x=x,
        status=status,
        objective=problem.objective(x),
        active_set=tuple(sorted(working)),
        multipliers=mu,
        eq_multipliers=nu,
        iterations=iterations,
    )


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> Dict[str, float]:
    """
    KKT 殘差

    Returns:
        stationarity、primal（不等式與等式違反量）、dual（負乘子）、
        complementarity 的最大絕對值
    """
    G, h = problem.inequality_matrices()
    x = solution.x
    mu = solution.multipliers if solution.multipliers.size == G.shape[0] else np.zeros(G.shape[0])
    nu = solution.eq_multipliers if solution.eq_multipliers.size == problem.Aeq.shape[0] \
        else np.zeros(problem.Aeq.shape[0])

    gradient = problem.H @ x + problem.f + G.T @ mu + problem.Aeq.T @ nu
    slack = G @ x - h
    return {
        "stationarity": float(np.max(np.abs(gradient), initial=0.0)),
        "primal": float(max(np.max(slack, initial=0.0),
                            np.max(np.abs(problem.Aeq @ x - problem.beq), initial=0.0))),
        "dual": float(max(-np.min(mu, initial=0.0), 0.0)),
        "complementarity": float(np.max(np.abs(mu * slack), initial=0.0)),
    }
