"""
估測模組
由 ground truth 合成帶雜訊的 360° 量測，並以等速 Kalman filter 追蹤每個 agent
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .world_sim import WorldState, frozen_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scan:
    """
    360° 量測

    每個回波對應一個感測範圍內的 agent（模擬端以 ground truth id 關聯）。
    ranges 為到 agent 中心的距離，夾在 (0, max_range]。
    """
    ranges: np.ndarray
    angles: np.ndarray
    agent_ids: Tuple[int, ...]
    max_range: float
    origin: np.ndarray

    def __len__(self) -> int:
        return len(self.agent_ids)

    def positions(self) -> np.ndarray:
        """回波換算成世界座標位置"""
        if not self.agent_ids:
            return np.zeros((0, 2))
        return self.origin + self.ranges[:, None] * np.column_stack((np.cos(self.angles), np.sin(self.angles)))


@dataclass(frozen=True)
class AgentEstimate:
    """
    Agent 估測狀態

    state z = [o_x, o_y, v_x, v_y]，covariance 為 4×4 對稱半正定矩陣。
    """
    agent_id: int
    state: np.ndarray
    covariance: np.ndarray
    last_update_tick: int
    misses: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.state[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[2:]


@dataclass(frozen=True)
class AgentPrediction:
    """
    Agent 未來狀態預測

    positions[i-1] 為 o^[i]，covariances[i-1] 為 Σ_{i,o}，i = 1..N。
    """
    agent_id: int
    origin: np.ndarray
    origin_covariance: np.ndarray
    positions: np.ndarray
    covariances: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.positions)

    def position_at(self, i: int) -> np.ndarray:
        """o^[i]，i = 0 為目前估測"""
        return self.origin if i == 0 else self.positions[i - 1]

    def covariance_at(self, i: int) -> np.ndarray:
        return self.origin_covariance if i == 0 else self.covariances[i - 1]


# ========================================
# 量測
# ========================================

def sense(
    world: WorldState,
    noise_std: float,
    sensing_range: float,
    rng: Optional[np.random.Generator] = None,
    bearing_noise_std: float = 0.0,
) -> Scan:
    """
    產生 360° 量測

    感測範圍內的 agent 產生一個回波，距離加上 N(0, noise_std²)，夾在 (0, d_max]。

    Args:
        world: 目前世界
        noise_std: 距離雜訊標準差
        sensing_range: 最大感測距離 d_max
        rng: 雜訊用亂數產生器（noise_std 為 0 時可省略）
        bearing_noise_std: 方位角雜訊標準差

    Returns:
        Scan
    """
    if noise_std < 0:
        raise ValueError("noise_std 不可為負")
    origin = np.asarray(world.robot.position)
    ids, ranges, angles = [], [], []
    for agent in world.agents:
        offset = agent.position - origin
        distance = float(np.hypot(*offset))
        if distance > sensing_range:
            continue
        ids.append(agent.id)
        ranges.append(distance)
        angles.append(float(np.arctan2(offset[1], offset[0])))

    ranges = np.array(ranges, dtype=float)
    angles = np.array(angles, dtype=float)
    if ids and (noise_std > 0 or bearing_noise_std > 0):
        if rng is None:
            raise ValueError("雜訊不為 0 時需要提供 rng")
        ranges = ranges + rng.normal(0.0, noise_std, size=len(ids)) if noise_std > 0 else ranges
        angles = angles + rng.normal(0.0, bearing_noise_std, size=len(ids)) if bearing_noise_std > 0 else angles
    ranges = np.clip(ranges, np.finfo(float).tiny, sensing_range)

    return Scan(
        ranges=frozen_array(ranges),
        angles=frozen_array(angles),
        agent_ids=tuple(ids),
        max_range=sensing_range,
        origin=frozen_array(origin),
    )


# ========================================
# Kalman filter
# ========================================

def transition_matrix(dt: float) -> np.ndarray:
    """等速模型 F：position += velocity·dt"""
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise_matrix(dt: float, accel_variance: float) -> np.ndarray:
    """白色加速度雜訊 Q = σ²·G·Gᵀ，G = [dt²/2; dt]（每軸）"""
    q = np.array([[dt**4 / 4.0, dt**3 / 2.0], [dt**3 / 2.0, dt**2]]) * accel_variance
    Q = np.zeros((4, 4))
    Q[np.ix_([0, 2], [0, 2])] = q
    Q[np.ix_([1, 3], [1, 3])] = q
    return Q


OBSERVATION = np.hstack((np.eye(2), np.zeros((2, 2))))


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def initialize_estimate(
    agent_id: int,
    measured_position,
    tick: int,
    measurement_std: float,
    prior_velocity_std: float,
) -> AgentEstimate:
    """首次量測：位置取量測值，速度為 0，並給大的先驗共變異數"""
    state = np.concatenate((np.asarray(measured_position, dtype=float), np.zeros(2)))
    covariance = np.diag([measurement_std**2] * 2 + [prior_velocity_std**2] * 2)
    return AgentEstimate(agent_id, frozen_array(state), frozen_array(covariance), tick)


def kalman_predict(estimate: AgentEstimate, dt: float, process_noise: float = 0.0) -> AgentEstimate:
    """只做時間更新（該 tick 沒有回波時使用）"""
    F = transition_matrix(dt)
    state = F @ estimate.state
    covariance = _symmetrize(F @ estimate.covariance @ F.T + process_noise_matrix(dt, process_noise))
    return replace(estimate, state=frozen_array(state), covariance=frozen_array(covariance))


def kalman_update(
    estimate: AgentEstimate,
    measured_position,
    dt: float,
    process_noise: float = 1e-6,
    measurement_std: float = 0.01,
    tick: Optional[int] = None,
) -> AgentEstimate:
    """
    標準 predict-update

    Args:
        estimate: 先驗估測
        measured_position: 量測到的位置（只觀測位置）
        dt: 距上次更新的時間
        process_noise: 加速度變異數
        measurement_std: 位置量測標準差
        tick: 更新時間戳，預設為 last_update_tick + dt

    Returns:
        後驗估測（共變異數為對稱正定）
    """
    predicted = kalman_predict(estimate, dt, process_noise)
    x, P = predicted.state, predicted.covariance
    R = np.eye(2) * measurement_std**2

    innovation = np.asarray(measured_position, dtype=float) - OBSERVATION @ x
    S = OBSERVATION @ P @ OBSERVATION.T + R
    K = np.linalg.solve(S, OBSERVATION @ P).T

    state = x + K @ innovation
    # Joseph form 維持數值上的半正定
    I_KH = np.eye(4) - K @ OBSERVATION
    covariance = _symmetrize(I_KH @ P @ I_KH.T + K @ R @ K.T)

    new_tick = tick if tick is not None else estimate.last_update_tick + int(round(dt))
    return replace(
        estimate,
        state=frozen_array(state),
        covariance=frozen_array(covariance),
        last_update_tick=new_tick,
        misses=0,
    )


def predict(estimate: AgentEstimate, horizon: int, dt: float = 1.0) -> AgentPrediction:
    """
    預測未來 N 步

    o^[i] = o + i·dt·v，Σ_i = F^i Σ₀ (F^i)ᵀ，取左上 2×2 區塊為 Σ_{i,o}。
    預測不加入 process noise，誤差只由目前的估測共變異數傳播。
    """
    if horizon < 1:
        raise ValueError("horizon 至少為 1")
    steps = np.arange(1, horizon + 1, dtype=float)
    positions = estimate.position[None, :] + (steps * dt)[:, None] * estimate.velocity[None, :]

    covariances = np.empty((horizon, 2, 2))
    P0 = estimate.covariance
    for idx, i in enumerate(steps):
        Fi = transition_matrix(i * dt)  # F^i = F(i·dt) 對等速模型成立
        Pi = Fi @ P0 @ Fi.T
        covariances[idx] = _symmetrize(Pi[:2, :2])

    return AgentPrediction(
        agent_id=estimate.agent_id,
        origin=frozen_array(estimate.position),
        origin_covariance=frozen_array(P0[:2, :2]),
        positions=frozen_array(positions),
        covariances=frozen_array(covariances),
    )


def nees(estimate: AgentEstimate, true_state) -> float:
    """正規化估測誤差平方（4 自由度 chi-square 統計量）"""
    error = np.asarray(true_state, dtype=float) - estimate.state
    return float(error @ np.linalg.solve(estimate.covariance, error))


# ========================================
# 多目標追蹤
# ========================================

class AgentTracker:
    """
    Agent 追蹤器

    以模擬端 id 關聯回波；沒有回波的 track 只做時間更新，
    連續 track_drop_misses 個 tick 沒有回波就刪除。

    使用範例:
    ```python
    tracker = AgentTracker(estimator_config)
    tracker.update(scan, tick=world.tick)
    estimates = tracker.estimates()
    ```
    """

    def __init__(self, config, dt: float = 1.0):
        self.config = config
        self.dt = dt
        self._tracks: Dict[int, AgentEstimate] = {}

    def update(self, scan: Scan, tick: int) -> Tuple[AgentEstimate, ...]:
        measured = dict(zip(scan.agent_ids, scan.positions()))
        tracks: Dict[int, AgentEstimate] = {}

        for agent_id, estimate in self._tracks.items():
            # coast 過的 track 已經前進 misses 步
            elapsed = (tick - estimate.last_update_tick - estimate.misses) * self.dt
            if agent_id in measured:
                tracks[agent_id] = kalman_update(
                    estimate, measured[agent_id], elapsed,
                    process_noise=self.config.process_noise,
                    measurement_std=self.config.kalman_measurement_std,
                    tick=tick,
                )
                continue
            misses = estimate.misses + 1
            if misses >= self.config.track_drop_misses:
                logger.debug("drop track %d after %d misses", agent_id, misses)
                continue
            coasted = kalman_predict(estimate, self.dt, self.config.process_noise)
            tracks[agent_id] = replace(coasted, misses=misses)

        for agent_id, position in measured.items():
            if agent_id not in tracks:
                tracks[agent_id] = initialize_estimate(
                    agent_id, position, tick,
                    self.config.kalman_measurement_std, self.config.prior_velocity_std,
                )

        self._tracks = tracks
        return self.estimates()

    def estimates(self) -> Tuple[AgentEstimate, ...]:
        """目前所有 track 的不可變快照（依 id 排序）"""
        return tuple(self._tracks[k] for k in sorted(self._tracks))

    def __len__(self) -> int:
        return len(self._tracks)
