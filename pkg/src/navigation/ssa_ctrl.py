"""
SSA 安全控制模組
參考控制器追蹤軌跡，再把參考控制投影到滿足 safety index 遞減條件的集合

safety index: φ = d_min² − d² − k·ḋ
約束: L_fφ + L_gφ·u ≤ −η·φ（φ ≥ 0 時加入）
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core.config import ControllerConfig, QpConfig, SafetyIndexParams
from ..core.errors import SingularGeometryError
from .estimation import AgentEstimate
from .qp_core import QpProblem, QpStatus, solve
from .world_sim import RobotModel, RobotState, wrap_angle

logger = logging.getLogger(__name__)

FALLBACK_PROXIMAL = 1e-3
FALLBACK_SLACK_REGULARIZER = 1e-6


@dataclass(frozen=True)
class SsaConstraint:
    """單一 agent 的 SSA 約束：lg·u ≤ −η·φ − lf"""
    agent_id: int
    phi: float
    lf: float
    lg: np.ndarray
    eta: float

    @property
    def rhs(self) -> float:
        return -self.eta * self.phi

    def satisfied_by(self, u, tol: float = 0.0) -> bool:
        return float(self.lf + self.lg @ np.asarray(u, dtype=float)) <= self.rhs + tol


@dataclass(frozen=True)
class SsaTelemetry:
    """每個 tick 的安全控制紀錄"""
    phi_values: Tuple[float, ...]
    constraint_count: int
    status: str
    deviation: float
    fallback: bool = False


@dataclass(frozen=True)
class ControlBounds:
    lower: np.ndarray
    upper: np.ndarray

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))


def control_bounds(model: RobotModel, controller: ControllerConfig) -> ControlBounds:
    """double integrator 每軸 |u| ≤ u_max；unicycle 為 (|a| ≤ u_max, |α| ≤ alpha_max)"""
    if RobotModel(model) is RobotModel.DOUBLE_INTEGRATOR:
        limit = np.array([controller.u_max, controller.u_max])
    else:
        limit = np.array([controller.u_max, controller.alpha_max])
    return ControlBounds(-limit, limit)


# ========================================
# 參考控制器
# ========================================

def reference_control(
    robot: RobotState,
    waypoint,
    gains: ControllerConfig,
    velocity_ff=None,
    saturate: bool = True,
) -> np.ndarray:
    """
    PD 參考控制

    double integrator: u = kp·e + kd·(v_ff − v)
    unicycle: 線加速度取上式在機頭方向的投影，角加速度為
    k_heading·wrap(θ_des − θ) − k_omega·ω

    Args:
        robot: 機器人狀態
        waypoint: 追蹤目標點
        gains: PD 增益與控制上限
        velocity_ff: 期望速度（預設為 0）
        saturate: 是否夾在控制上限內

    Returns:
        參考控制 u^r
    """
    error = np.asarray(waypoint, dtype=float) - robot.position
    v_desired = np.zeros(2) if velocity_ff is None else np.asarray(velocity_ff, dtype=float)
    accel = gains.kp * error + gains.kd * (v_desired - robot.velocity)

    if robot.model is RobotModel.DOUBLE_INTEGRATOR:
        u = accel
    else:
        heading = np.array([np.cos(robot.heading), np.sin(robot.heading)])
        steer = v_desired + error
        if np.hypot(*steer) > 1e-12:
            theta_desired = float(np.arctan2(steer[1], steer[0]))
        else:
            theta_desired = robot.heading
        alpha = gains.k_heading * wrap_angle(theta_desired - robot.heading) - gains.k_omega * robot.angular_speed
        u = np.array([float(accel @ heading), alpha])

    if saturate:
        bounds = control_bounds(robot.model, gains)
        u = np.clip(u, bounds.lower, bounds.upper)
    return u


# ========================================
# Safety index
# ========================================

def safety_index(
    robot: RobotState,
    agent_position,
    agent_velocity,
    params: SafetyIndexParams,
    d_min: Optional[float] = None,
) -> Tuple[float, float, np.ndarray]:
    """
    計算 safety index 與其 Lie 導數

    Args:
        robot: 機器人狀態
        agent_position: agent 位置估測
        agent_velocity: agent 速度估測（視為等速）
        params: k_grad、η 與 d_min
        d_min: 覆寫 params.d_min

    Returns:
        (φ, L_fφ, L_gφ)，滿足 φ̇ = L_fφ + L_gφ·u

    Raises:
        SingularGeometryError: 機器人與 agent 中心重合
    """
    d_min = d_min if d_min is not None else params.d_min
    if d_min is None:
        raise ValueError("需要提供 d_min")
    k = params.k_grad

    r = robot.position - np.asarray(agent_position, dtype=float)
    rv = robot.velocity - np.asarray(agent_velocity, dtype=float)
    d = float(np.hypot(*r))
    if d == 0.0:
        raise SingularGeometryError("機器人與 agent 中心重合")
    d_dot = float(r @ rv) / d
    phi = d_min**2 - d**2 - k * d_dot
    drift = float(rv @ rv) - d_dot**2

    if robot.model is RobotModel.DOUBLE_INTEGRATOR:
        lf = -2.0 * d * d_dot - k * drift / d
        lg = -k * r / d
    else:
        heading = np.array([np.cos(robot.heading), np.sin(robot.heading)])
        normal = np.array([-np.sin(robot.heading), np.cos(robot.heading)])
        turning = robot.linear_speed * robot.angular_speed * float(r @ normal)
        lf = -2.0 * d * d_dot - k * (drift + turning) / d
        lg = np.array([-k * float(r @ heading) / d, 0.0])
    return float(phi), float(lf), lg


def build_constraints(
    robot: RobotState,
    estimates: Sequence[AgentEstimate],
    params: SafetyIndexParams,
    d_min: Optional[float] = None,
) -> Tuple[List[SsaConstraint], Tuple[float, ...]]:
    """
    對所有追蹤中的 agent 計算 φ，φ ≥ 0 者加入約束

    Returns:
        (約束列表, 所有 φ 值)
    """
    constraints, phis = [], []
    for estimate in estimates:
        phi, lf, lg = safety_index(robot, estimate.position, estimate.velocity, params, d_min)
        phis.append(phi)
        if phi >= 0.0:
            constraints.append(SsaConstraint(estimate.agent_id, phi, lf, lg, params.eta))
    return constraints, tuple(phis)


# ========================================
# 安全控制 QP
# ========================================

@dataclass(frozen=True)
class SafeControlResult:
    u: np.ndarray
    status: str
    fallback: bool
    constraints: Tuple[SsaConstraint, ...] = field(default=())


def safe_control(
    u_ref,
    constraints: Sequence[SsaConstraint],
    bounds: Optional[ControlBounds] = None,
    qp: Optional[QpConfig] = None,
) -> SafeControlResult:
    """
    u = argmin ‖u − u^r‖²  s.t.  L_fφ_j + L_gφ_j·u ≤ −η·φ_j, u ∈ U

    u^r 已滿足所有約束時直接回傳 u^r；QP 不可行時改解最小違反量的
    slack 問題並標記 fallback。

    Args:
        u_ref: 參考控制
        constraints: 已觸發的 SSA 約束
        bounds: 控制上下限（None 表示無限制）
        qp: QP 容差設定

    Returns:
        SafeControlResult
    """
    qp = qp or QpConfig()
    u_ref = np.asarray(u_ref, dtype=float)
    n = u_ref.size
    in_bounds = bounds is None or bounds.contains(u_ref)
    if in_bounds and all(c.satisfied_by(u_ref) for c in constraints):
        return SafeControlResult(u_ref.copy(), "reference", False, tuple(constraints))

    A = np.array([c.lg for c in constraints]).reshape(-1, n)
    b = np.array([c.rhs - c.lf for c in constraints])
    lower = None if bounds is None else bounds.lower
    upper = None if bounds is None else bounds.upper

    problem = QpProblem(H=2.0 * np.eye(n), f=-2.0 * u_ref, A=A, b=b, lower=lower, upper=upper)
    solution = solve(problem, tol=qp.qp_tol, max_iter=qp.qp_max_iter)
    if solution.status is QpStatus.OPTIMAL:
        return SafeControlResult(solution.x, solution.status.value, False, tuple(constraints))

    # 最小違反量：變數 (u, s)，min s + 1e-3‖u − u^r‖²
    logger.info("SSA QP %s with %d constraints, using least-violation fallback",
                solution.status.value, len(constraints))
    H = np.diag(np.append(np.full(n, 2.0 * FALLBACK_PROXIMAL), FALLBACK_SLACK_REGULARIZER))
    f = np.append(-2.0 * FALLBACK_PROXIMAL * u_ref, 1.0)
    A_slack = np.vstack((np.hstack((A, -np.ones((len(constraints), 1)))), np.append(np.zeros(n), -1.0)))
    b_slack = np.append(b, 0.0)
    lower_s = None if lower is None else np.append(lower, -np.inf)
    upper_s = None if upper is None else np.append(upper, np.inf)
    relaxed = solve(QpProblem(H=H, f=f, A=A_slack, b=b_slack, lower=lower_s, upper=upper_s),
                    tol=qp.qp_tol, max_iter=qp.qp_max_iter)
    u = relaxed.x[:n]
    if bounds is not None:
        u = np.clip(u, bounds.lower, bounds.upper)
    return SafeControlResult(u, "fallback", True, tuple(constraints))


class SafeController:
    """
    每個 tick 執行的 SSA 控制器

    使用範例:
    ```python
    controller = SafeController(config)
    u, telemetry = controller.filter(world.robot, estimates, u_ref)
    ```
    """

    def __init__(self, config):
        self.config = config
        self.params = config.safety_index
        self.d_min = config.d_min

    def filter(self, robot: RobotState, estimates: Sequence[AgentEstimate], u_ref) -> Tuple[np.ndarray, SsaTelemetry]:
        constraints, phis = build_constraints(robot, estimates, self.params, self.d_min)
        bounds = control_bounds(robot.model, self.config.controller)
        result = safe_control(u_ref, constraints, bounds, self.config.qp)
        telemetry = SsaTelemetry(
            phi_values=phis,
            constraint_count=len(constraints),
            status=result.status,
            deviation=float(np.linalg.norm(result.u - np.asarray(u_ref, dtype=float))),
            fallback=result.fallback,
        )
        return result.u, telemetry
