"""
CFS 軌跡最佳化模組
以 Convex Feasible Set 對 DAGap 參考軌跡做一次（或收斂模式下多次）最佳化，
檢查可行性並計算軌跡分數
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Mapping, Optional, Sequence

import numpy as np

from ..core.config import CfsWeights, QpConfig
from ..core.errors import NoCandidateError
from .dagap import Trajectory
from .estimation import AgentPrediction
from .qp_core import QpProblem, QpStatus, solve
from .uncertainty import SafetySchedule
from .world_sim import frozen_array

logger = logging.getLogger(__name__)

SPACING_SLACK = 1e-6
CONSTRAINT_MARGIN = 1e-9
CONVERGE_TOLERANCE = 1e-6
CONVERGE_MAX_ITER = 20


@dataclass(frozen=True)
class CfsProblem:
    """
    單條軌跡的 CFS 問題

    obstacles[j, i] 為 agent j 在第 i 步的預測位置 o^[i]_j，
    d_safe[j, i] 為對應的安全距離（i = 0 的欄位不使用）。
    """
    reference: np.ndarray
    obstacles: np.ndarray
    d_safe: np.ndarray
    weights: CfsWeights
    goal_direction: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        n_w = len(self.reference)
        if self.obstacles.shape[1:] != (n_w, 2) or self.d_safe.shape != self.obstacles.shape[:2]:
            raise ValueError("obstacles / d_safe 與參考軌跡長度不符")

    @property
    def n_waypoints(self) -> int:
        return len(self.reference)


@dataclass(frozen=True)
class CfsResult:
    waypoints: np.ndarray
    status: QpStatus
    objective: float
    iterations: int


@dataclass(frozen=True)
class ScoredTrajectory:
    """最佳化後的候選軌跡與其分數"""
    trajectory: Trajectory
    reference: Trajectory
    J: float
    feasible: bool
    cfs_status: QpStatus


# ========================================
# 差分矩陣與目標函數
# ========================================

def difference_operators(n_waypoints: int, dt: float = 1.0):
    """
    速度與加速度差分矩陣（作用在攤平的 [x0, y0, x1, y1, ...] 上）

    Returns:
        (V, A)
    """
    eye2 = np.eye(2)
    first = np.diff(np.eye(n_waypoints), axis=0) / dt
    second = np.diff(np.eye(n_waypoints), n=2, axis=0) / dt**2
    return np.kron(first, eye2), np.kron(second, eye2)


def cost_terms(waypoints, reference, weights: CfsWeights, dt: float = 1.0):
    """(w_r‖s−s_r‖², w_v‖Vs‖², w_a‖As‖²)"""
    s = np.asarray(waypoints, dtype=float).reshape(-1)
    s_r = np.asarray(reference, dtype=float).reshape(-1)
    V, A = difference_operators(len(s) // 2, dt)
    return (
        weights.w_r * float(np.sum((s - s_r) ** 2)),
        weights.w_v * float(np.sum((V @ s) ** 2)),
        weights.w_a * float(np.sum((A @ s) ** 2)),
    )


def objective(waypoints, problem: CfsProblem) -> float:
    return float(sum(cost_terms(waypoints, problem.reference, problem.weights, problem.dt)))


# ========================================
# 問題建構
# ========================================

def build_problem(
    reference: Trajectory,
    predictions: Sequence[AgentPrediction],
    schedules: Optional[Mapping[int, SafetySchedule]],
    r_ins: float,
    weights: CfsWeights,
    target,
    dt: float = 1.0,
) -> CfsProblem:
    """
    由參考軌跡與 agent 預測建立 CFS 問題

    waypoint i 對應預測 o^[i]；沒有排程的 agent 使用 r_ins。
    """
    ref = np.asarray(reference.waypoints, dtype=float)
    n_w = len(ref)
    obstacles = np.zeros((len(predictions), n_w, 2))
    d_safe = np.zeros((len(predictions), n_w))
    for j, prediction in enumerate(predictions):
        schedule = None if schedules is None else schedules.get(prediction.agent_id)
        for i in range(n_w):
            obstacles[j, i] = prediction.position_at(i)
            d_safe[j, i] = r_ins if schedule is None else schedule.d_safe_at(i)

    heading = np.asarray(target, dtype=float) - ref[0]
    norm = float(np.hypot(*heading))
    goal_direction = heading / norm if norm > 0 else np.array([1.0, 0.0])
    return CfsProblem(
        reference=frozen_array(ref),
        obstacles=frozen_array(obstacles),
        d_safe=frozen_array(d_safe),
        weights=weights,
        goal_direction=frozen_array(goal_direction),
        dt=dt,
    )


def _linearize(problem: CfsProblem, about: np.ndarray):
    """
    在 about 附近把 D(x^[i], o^[i]_j) ≥ d_safe^i 線性化成 ĝᵀ(x^[i] − o) ≥ d_safe^i

    ĝ 為 agent 指向參考 waypoint 的單位向量；參考點恰在 agent 中心時沿用
    前一步的 ĝ，再退而使用目標方向。
    """
    n_w = problem.n_waypoints
    rows, rhs = [], []
    for j in range(problem.obstacles.shape[0]):
        previous = None
        for i in range(1, n_w):
            offset = about[i] - problem.obstacles[j, i]
            d = float(np.hypot(*offset))
            if d > 0:
                g = offset / d
            elif previous is not None:
                g = previous
            else:
                g = problem.goal_direction
            previous = g
            row = np.zeros(2 * n_w)
            row[2 * i: 2 * i + 2] = -g
            rows.append(row)
            rhs.append(-(problem.d_safe[j, i] + CONSTRAINT_MARGIN) - g @ problem.obstacles[j, i])
    if not rows:
        return np.zeros((0, 2 * n_w)), np.zeros(0)
    return np.array(rows), np.array(rhs)


def _qp_matrices(problem: CfsProblem):
    n_w = problem.n_waypoints
    w = problem.weights
    V, A = difference_operators(n_w, problem.dt)
    H = 2.0 * (w.w_r * np.eye(2 * n_w) + w.w_v * V.T @ V + w.w_a * A.T @ A)
    f = -2.0 * w.w_r * problem.reference.reshape(-1)

    pinned = [0] if n_w == 1 else [0, n_w - 1]
    Aeq = np.zeros((2 * len(pinned), 2 * n_w))
    beq = np.zeros(2 * len(pinned))
    for k, i in enumerate(pinned):
        Aeq[2 * k: 2 * k + 2, 2 * i: 2 * i + 2] = np.eye(2)
        beq[2 * k: 2 * k + 2] = problem.reference[i]
    return H, f, Aeq, beq


# ========================================
# 最佳化
# ========================================

def cfs_iterate(
    problem: CfsProblem,
    qp: Optional[QpConfig] = None,
    converge: bool = False,
) -> CfsResult:
    """
    CFS 最佳化

    預設只跑一次迭代；converge=True 時反覆在新解附近重新線性化，
    直到目標函數變化小於 1e-6 或達到 20 次。

    Args:
        problem: CFS 問題（兩端點固定）
        qp: QP 容差設定
        converge: 是否迭代到收斂

    Returns:
        CfsResult；QP 不可行時 waypoints 為原參考軌跡
    """
    qp = qp or QpConfig()
    n_w = problem.n_waypoints
    H, f, Aeq, beq = _qp_matrices(problem)
    reference = np.asarray(problem.reference, dtype=float)

    about = reference
    current_objective = objective(reference, problem)
    status = QpStatus.OPTIMAL
    iterations = 0
    max_outer = CONVERGE_MAX_ITER if converge else 1

    for iterations in range(1, max_outer + 1):
        G, h = _linearize(problem, about)
        max_iter = max(qp.qp_max_iter, 4 * (2 * n_w + G.shape[0]))
        solution = solve(QpProblem(H=H, f=f, A=G, b=h, Aeq=Aeq, beq=beq),
                         tol=qp.qp_tol, max_iter=max_iter, warm_start=about.reshape(-1))
        if solution.status is not QpStatus.OPTIMAL:
            if iterations == 1:
                logger.debug("CFS QP %s, keeping reference", solution.status.value)
                return CfsResult(frozen_array(reference), solution.status, current_objective, iterations)
            break

        candidate = solution.x.reshape(n_w, 2)
        # 端點以等式固定，消除數值誤差
        candidate[0] = reference[0]
        candidate[-1] = reference[-1]
        new_objective = objective(candidate, problem)
        change = abs(new_objective - current_objective)
        about, current_objective = candidate, new_objective
        if change < CONVERGE_TOLERANCE and iterations > 1:
            break

    return CfsResult(frozen_array(about), status, current_objective, iterations)


def is_feasible(waypoints, v_max: float, dt: float = 1.0) -> bool:
    """相鄰 waypoint 間距不超過 v_max·dt（含 1e-6 相對容差）"""
    pts = np.asarray(waypoints, dtype=float)
    if len(pts) < 2:
        return True
    spacing = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return bool(spacing.max() <= v_max * dt * (1.0 + SPACING_SLACK))


def safety_violations(waypoints, problem: CfsProblem, tolerance: float = 1e-9) -> int:
    """精確重新檢查 D(x^[i], o^[i]_j) ≥ d_safe^i（i ≥ 1）違反的數量"""
    pts = np.asarray(waypoints, dtype=float)
    distances = np.linalg.norm(pts[None, 1:, :] - problem.obstacles[:, 1:, :], axis=2)
    return int(np.sum(distances < problem.d_safe[:, 1:] - tolerance))


# ========================================
# 評分與預選
# ========================================

def score(waypoints, target, reference, weights: CfsWeights, dt: float = 1.0) -> float:
    """
    J = −D(target, x^[last]) − w_r‖s−s_r‖² − w_v‖Vs‖² − w_a‖As‖²

    分數越高越好。
    """
    pts = np.asarray(waypoints, dtype=float)
    distance = float(np.hypot(*(np.asarray(target, dtype=float) - pts[-1])))
    return -distance - float(sum(cost_terms(pts, reference, weights, dt)))


def preselect(trajectories: Sequence[Trajectory], target, count: int = 2) -> List[Trajectory]:
    """
    依終點到目標的距離挑出前 count 條（同距離時依 gap_key 排序）

    Raises:
        NoCandidateError: 沒有任何候選軌跡
    """
    if not trajectories:
        raise NoCandidateError("沒有候選軌跡可供預選")
    target = np.asarray(target, dtype=float)
    ranked = sorted(
        trajectories,
        key=lambda t: (float(np.hypot(*(target - t.last))), t.gap_key, t.traj_id),
    )
    return ranked[:count]


def optimize_candidate(
    reference: Trajectory,
    predictions: Sequence[AgentPrediction],
    schedules: Optional[Mapping[int, SafetySchedule]],
    r_ins: float,
    weights: CfsWeights,
    target,
    v_max: float,
    dt: float = 1.0,
    qp: Optional[QpConfig] = None,
) -> ScoredTrajectory:
    """對單一候選做 CFS、可行性檢查與評分"""
    problem = build_problem(reference, predictions, schedules, r_ins, weights, target, dt)
    result = cfs_iterate(problem, qp, converge=weights.cfs_converge)

    feasible = result.status is QpStatus.OPTIMAL and is_feasible(result.waypoints, v_max, dt)
    J = score(result.waypoints, target, problem.reference, weights, dt)
    if result.status is not QpStatus.OPTIMAL:
        J -= weights.infeasible_penalty

    optimized = replace(reference, waypoints=result.waypoints, score=J, feasible=feasible)
    return ScoredTrajectory(optimized, reference, J, feasible, result.status)


def reference_only(reference: Trajectory, target, v_max: float, weights: CfsWeights, dt: float = 1.0) -> ScoredTrajectory:
    """不做最佳化時的評分（DAGap / SGap 模式）"""
    J = score(reference.waypoints, target, reference.waypoints, weights, dt)
    feasible = is_feasible(reference.waypoints, v_max, dt)
    return ScoredTrajectory(replace(reference, score=J, feasible=feasible), reference, J, feasible, QpStatus.OPTIMAL)
