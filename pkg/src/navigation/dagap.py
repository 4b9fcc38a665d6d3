"""
DAGap 軌跡合成模組
在 N 步預測視野內逐步重新偵測間隙，每個開啟的間隙各合成一條候選軌跡，
並處理間隙的誕生（從最近的既有軌跡延伸）與消失（軌跡凍結）
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.config import GapConfig, PlannerConfig
from .estimation import AgentPrediction
from .gap_detect import SENTINEL_KEY, AgentPoint, Gap, detect_gaps, inflate
from .uncertainty import SafetySchedule
from .world_sim import frozen_array

logger = logging.getLogger(__name__)

SPACING_TOLERANCE = 1e-9


class TrajectoryStatus(str, Enum):
    ACTIVE = "active"
    CLOSED = "closed"


@dataclass(frozen=True)
class Trajectory:
    """
    候選軌跡

    waypoints[0] 為機器人目前位置，最多 N 個 waypoint。
    score 與 feasible 由 cfs_opt 填入。
    """
    traj_id: int
    gap_key: str
    waypoints: np.ndarray
    status: TrajectoryStatus = TrajectoryStatus.ACTIVE
    goal: Optional[np.ndarray] = None
    born_at: int = 1
    score: Optional[float] = None
    feasible: Optional[bool] = None

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def last(self) -> np.ndarray:
        return self.waypoints[-1]

    def spacings(self) -> np.ndarray:
        if len(self.waypoints) < 2:
            return np.zeros(0)
        return np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)

    def max_spacing(self) -> float:
        return float(np.max(self.spacings(), initial=0.0))


@dataclass(frozen=True)
class PlanningSnapshot:
    """規劃執行緒使用的不可變輸入"""
    robot_position: np.ndarray
    goal: np.ndarray
    predictions: Tuple[AgentPrediction, ...]
    horizon: int
    dt: float = 1.0
    sensing_range: float = 0.2
    tick: int = 0

    def __post_init__(self):
        for p in self.predictions:
            if p.horizon != self.horizon:
                raise ValueError(f"agent {p.agent_id} 預測長度 {p.horizon} 與 horizon {self.horizon} 不符")

    def agents_at(self, i: int) -> List[AgentPoint]:
        return [AgentPoint(p.agent_id, p.position_at(i)) for p in self.predictions]


# ========================================
# 梯度場
# ========================================

def pfm_step(
    current,
    gap_goal,
    flanking: Sequence[Tuple[np.ndarray, float]],
    step_bound: float,
    repulsion_gain: float = 0.02,
    circulation_gain: float = 1.0,
) -> np.ndarray:
    """
    沿間隙梯度場走一步

    方向為指向 gap_goal 的單位吸引力，加上影響半徑 2·r 內每個兩側 agent 的
    徑向排斥 k_rep·(1/d − 1/d_inf) 與沿膨脹圓切線、朝目標側的環流項。

    Args:
        current: 目前 waypoint
        gap_goal: 間隙目標
        flanking: 兩側 agent 的 (預測位置, 膨脹半徑)
        step_bound: 步長上限 v_max·dt
        repulsion_gain: 排斥增益
        circulation_gain: 環流增益

    Returns:
        下一個 waypoint，步長 ≤ min(step_bound, 到 gap_goal 的距離)
    """
    current = np.asarray(current, dtype=float)
    to_goal = np.asarray(gap_goal, dtype=float) - current
    distance = float(np.hypot(*to_goal))
    if distance == 0.0 or step_bound <= 0.0:
        return current.copy()

    attraction = to_goal / distance
    direction = attraction.copy()
    for center, radius in flanking:
        offset = current - np.asarray(center, dtype=float)
        d = float(np.hypot(*offset))
        influence = 2.0 * radius
        if d == 0.0 or d >= influence:
            continue
        normal = offset / d
        direction += repulsion_gain * (1.0 / d - 1.0 / influence) * normal

        tangent = np.array([-normal[1], normal[0]])
        if tangent @ attraction < 0:
            tangent = -tangent
        weight = np.clip((influence - d) / (influence - radius), 0.0, 1.0) if influence > radius else 1.0
        direction += circulation_gain * weight * tangent

    norm = float(np.hypot(*direction))
    if norm < 1e-12:
        direction, norm = attraction, 1.0
    return current + (direction / norm) * min(step_bound, distance)


# ========================================
# 軌跡合成
# ========================================

def straight_line_trajectory(
    start,
    target,
    horizon: int,
    step: float,
    gap_key: str = SENTINEL_KEY,
    traj_id: int = 0,
) -> Trajectory:
    """朝 target 以固定步長前進的直線軌跡，到達後停在 target"""
    start = np.asarray(start, dtype=float)
    offset = np.asarray(target, dtype=float) - start
    distance = float(np.hypot(*offset))
    unit = offset / distance if distance > 0 else np.zeros(2)
    travel = np.minimum(np.arange(horizon) * step, distance)
    waypoints = start[None, :] + travel[:, None] * unit[None, :]
    return Trajectory(traj_id, gap_key, frozen_array(waypoints), goal=frozen_array(target), born_at=0)


@dataclass
class _Branch:
    traj_id: int
    gap_key: str
    waypoints: List[np.ndarray]
    born_at: int
    gap: Optional[Gap] = None
    closed: bool = False

    def freeze(self) -> Trajectory:
        return Trajectory(
            traj_id=self.traj_id,
            gap_key=self.gap_key,
            waypoints=frozen_array(np.array(self.waypoints)),
            status=TrajectoryStatus.CLOSED if self.closed else TrajectoryStatus.ACTIVE,
            goal=None if self.gap is None else self.gap.goal,
            born_at=self.born_at,
        )


def _d_safe(schedules: Optional[Mapping[int, SafetySchedule]], agent_id: int, i: int, r_ins: float) -> float:
    if schedules is None or agent_id not in schedules:
        return r_ins
    return schedules[agent_id].d_safe_at(i)


def _flanking(
    gap: Gap,
    i: int,
    predictions: Mapping[int, AgentPrediction],
    schedules: Optional[Mapping[int, SafetySchedule]],
    r_ins: float,
) -> List[Tuple[np.ndarray, float]]:
    """第 i 步兩側實體 agent 的 (預測位置, 膨脹半徑)；虛擬 agent 不參與"""
    return [
        (predictions[aid].position_at(i), _d_safe(schedules, aid, i, r_ins))
        for aid in gap.flanking_ids
        if isinstance(aid, (int, np.integer)) and aid in predictions
    ]


def _birth_prefix(
    earlier: Sequence[_Branch],
    gap: Gap,
    h: int,
    origin: np.ndarray,
    extend: Callable[[np.ndarray, int], np.ndarray],
) -> List[np.ndarray]:
    """
    第 h 步誕生的軌跡前綴（長度 h）

    - 父分支取先前所有分支中（含本步剛關閉者）長度 ≥ h、第 h−1 個 waypoint 最接近間隙目標者
    - 先前分支都在更早關閉時，取最後一點最近者，並以梯度場往新間隙延伸到長度 h
    - 完全沒有先前分支時才是停在原點的前綴
    """
    if h == 1 or not earlier:
        return [origin.copy() for _ in range(h)]

    covering = [b for b in earlier if len(b.waypoints) >= h]
    if covering:
        parent = min(covering, key=lambda b: (float(np.hypot(*(b.waypoints[h - 1] - gap.goal))), b.traj_id))
        return [w.copy() for w in parent.waypoints[:h]]

    parent = min(earlier, key=lambda b: (float(np.hypot(*(b.waypoints[-1] - gap.goal))), b.traj_id))
    prefix = [w.copy() for w in parent.waypoints]
    while len(prefix) < h:
        prefix.append(extend(prefix[-1], len(prefix)))
    return prefix


def synthesize(
    snapshot: PlanningSnapshot,
    schedules: Optional[Mapping[int, SafetySchedule]],
    gap_params: GapConfig,
    planner: PlannerConfig,
    v_max: float,
    include_closed: bool = False,
) -> List[Trajectory]:
    """
    DAGap 多軌跡合成

    第 h 步（h = 1..N−1）以預測位置 o^[h] 與 d_safe^h 重新偵測間隙：
    - 消失的間隙讓對應軌跡關閉並凍結（關閉於第 h 步的軌跡恰有 h 個 waypoint）
    - 新出現（或曾關閉後重新開啟）的間隙從最近的既有軌跡延伸，見 _birth_prefix
    - 每條進行中的軌跡沿梯度場前進一步

    Args:
        snapshot: 規劃輸入
        schedules: agent id -> 安全距離排程；None 代表固定使用 r_ins
        gap_params: 間隙偵測參數
        planner: 梯度場增益
        v_max: 機器人最大速度
        include_closed: 是否一併回傳已關閉的軌跡

    Returns:
        最終仍開啟的間隙的軌跡；整個視野都沒有間隙時回傳單一 sentinel 直線軌跡
    """
    N = snapshot.horizon
    origin = np.asarray(snapshot.robot_position, dtype=float)
    step_bound = v_max * snapshot.dt
    predictions = {p.agent_id: p for p in snapshot.predictions}
    r_ins = gap_params.r_ins

    def advance(current, gap: Gap, i: int) -> np.ndarray:
        return pfm_step(current, gap.goal, _flanking(gap, i, predictions, schedules, r_ins), step_bound,
                        planner.pfm_repulsion_gain, planner.pfm_circulation_gain)

    branches: List[_Branch] = []
    active: Dict[str, _Branch] = {}
    next_id = 0

    for h in range(1, N):
        agents = snapshot.agents_at(h)
        radii = {a.agent_id: _d_safe(schedules, a.agent_id, h, r_ins) for a in agents}
        inflated = inflate(agents, radii, origin=origin, max_range=snapshot.sensing_range)
        gaps = {g.gap_key: g for g in detect_gaps(inflated, gap_params, snapshot.sensing_range,
                                                  snapshot.goal, origin=origin)}

        for key in [k for k in active if k not in gaps]:
            branch = active.pop(key)
            branch.closed = True
            logger.debug("gap %s closed at step %d", key, h)

        earlier = list(branches)
        for key, gap in gaps.items():
            if key in active:
                active[key].gap = gap
                continue
            prefix = _birth_prefix(earlier, gap, h, origin, lambda w, i, g=gap: advance(w, g, i))
            branch = _Branch(next_id, key, prefix, born_at=h, gap=gap)
            next_id += 1
            branches.append(branch)
            active[key] = branch

        # 前綴複製必須在本步所有誕生完成後才推進，確保前綴長度一致
        for branch in active.values():
            branch.waypoints.append(advance(branch.waypoints[-1], branch.gap, h))

    if not branches:
        logger.debug("no gap over the horizon, using sentinel trajectory")
        return [straight_line_trajectory(origin, snapshot.goal, N, step_bound)]

    frozen = [b.freeze() for b in branches]
    if include_closed:
        return frozen
    return [t for t in frozen if t.status is TrajectoryStatus.ACTIVE]


def static_predictions(predictions: Sequence[AgentPrediction]) -> Tuple[AgentPrediction, ...]:
    """SGap 用：把整個視野的預測凍結在目前估測位置"""
    frozen = []
    for p in predictions:
        positions = np.repeat(np.asarray(p.origin)[None, :], p.horizon, axis=0)
        covariances = np.repeat(np.asarray(p.origin_covariance)[None, :, :], p.horizon, axis=0)
        frozen.append(replace(p, positions=frozen_array(positions), covariances=frozen_array(covariances)))
    return tuple(frozen)


# ========================================
# CSV 輸出
# ========================================

TRAJECTORY_COLUMNS = ("traj_id", "gap_key", "step", "x", "y", "status")


def write_trajectories_csv(trajectories: Sequence[Trajectory], path: Union[str, Path]) -> Path:
    """輸出軌跡集合（供繪圖使用）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for traj in trajectories:
            for step, (x, y) in enumerate(traj.waypoints):
                writer.writerow([traj.traj_id, traj.gap_key, step, repr(float(x)), repr(float(y)),
                                 traj.status.value])
    return path
