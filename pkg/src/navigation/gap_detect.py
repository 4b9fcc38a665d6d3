"""
間隙偵測模組
膨脹 agent、計算切點，依距離差與角度差兩個條件取出可通行的間隙

角度一律以機器人為原點、逆時針為正；切點 left 在 agent 方位角的逆時針側，
right 在順時針側。順時針掃描時，間隙由前一個 agent 的 right 切點
延伸到下一個 agent 的 left 切點。
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.config import GapConfig
from ..core.errors import NumericDomainError
from .world_sim import frozen_array, wrap_angle

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
SENTINEL_KEY = "sentinel"


class GapStatus(str, Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True)
class AgentPoint:
    """間隙偵測用的最小 agent 描述（id + 世界座標位置）"""
    agent_id: int
    position: np.ndarray


@dataclass(frozen=True)
class InflatedAgent:
    """
    膨脹後的 agent

    center 為相對機器人的位置；tangent 以 (angle, range) 表示。
    虛擬 agent 的半徑為 0，兩個切點重合。
    """
    agent_id: Union[int, str]
    center: np.ndarray
    inflation_radius: float
    left_tangent: Tuple[float, float]
    right_tangent: Tuple[float, float]
    virtual: bool = False

    @property
    def bearing(self) -> float:
        return float(np.arctan2(self.center[1], self.center[0]))

    @property
    def distance(self) -> float:
        return float(np.hypot(*self.center))

    @property
    def half_angle(self) -> float:
        return 0.5 * float(np.mod(self.left_tangent[0] - self.right_tangent[0], TWO_PI))

    @property
    def key(self) -> str:
        if self.virtual:
            return str(self.agent_id)
        return f"a{self.agent_id}"


@dataclass(frozen=True)
class InflationResult:
    """
    膨脹結果

    agents 為可計算切點的 agent；flagged_ids 為已進入膨脹半徑內、
    交由 SSA 處理的 agent。
    """
    agents: Tuple[InflatedAgent, ...]
    flagged_ids: Tuple[int, ...] = ()

    def __iter__(self) -> Iterator[InflatedAgent]:
        return iter(self.agents)

    def __len__(self) -> int:
        return len(self.agents)

    def __getitem__(self, index: int) -> InflatedAgent:
        return self.agents[index]


@dataclass(frozen=True)
class Gap:
    """
    可通行間隙

    逆時針方向由 left 端點角度延伸 width 到 right 端點角度。
    range_diff / angle_diff 記錄產生此間隙的 agent 配對的偵測證據，
    虛擬 agent 切出的子間隙沿用母間隙的證據。
    """
    gap_key: str
    right: Tuple[float, float]
    left: Tuple[float, float]
    flanking_ids: Tuple[Union[int, str], ...]
    origin: np.ndarray
    range_diff: float
    angle_diff: float
    status: GapStatus = GapStatus.OPEN
    goal: Optional[np.ndarray] = None
    parent_ids: Tuple[int, ...] = field(default=())
    sentinel: bool = False

    @property
    def width(self) -> float:
        if self.sentinel:
            return TWO_PI
        return float(np.mod(self.right[0] - self.left[0], TWO_PI))

    @property
    def region_radius(self) -> float:
        return max(self.right[1], self.left[1])

    def endpoints(self) -> np.ndarray:
        """兩端點的世界座標，依 (right, left) 排列"""
        return np.array([
            self.origin + r * np.array([np.cos(a), np.sin(a)])
            for a, r in (self.right, self.left)
        ])

    def contains_bearing(self, angle: float) -> bool:
        if self.sentinel:
            return True
        return float(np.mod(angle - self.left[0], TWO_PI)) <= self.width

    def contains_point(self, point, tol: float = 1e-9) -> bool:
        """點是否位於間隙區域（半徑為較遠端點距離的扇形）內"""
        offset = np.asarray(point, dtype=float) - self.origin
        distance = float(np.hypot(*offset))
        if distance > self.region_radius + tol:
            return False
        if distance <= tol:
            return True
        return self.contains_bearing(float(np.arctan2(offset[1], offset[0])))


# ========================================
# 膨脹與切點
# ========================================

def tangent_points(center, radius: float) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """
    由原點到圓的兩個切點

    Args:
        center: 圓心（相對原點）
        radius: 圓半徑

    Returns:
        (left, right)，每個為 (angle, range)；left 在逆時針側
    """
    rho = float(np.hypot(*center))
    if radius < 0 or rho <= radius:
        raise NumericDomainError(f"切點不存在：距離 {rho:.6g} 不大於半徑 {radius:.6g}")
    bearing = float(np.arctan2(center[1], center[0]))
    half = float(np.arcsin(radius / rho))
    tangent_range = float(np.sqrt(rho * rho - radius * radius))
    return (wrap_angle(bearing + half), tangent_range), (wrap_angle(bearing - half), tangent_range)


def _radius_for(agent_id: int, index: int, safety_radius) -> float:
    if isinstance(safety_radius, Mapping):
        return float(safety_radius[agent_id])
    if np.ndim(safety_radius) == 0:
        return float(safety_radius)
    return float(safety_radius[index])


def inflate(
    agents: Sequence,
    safety_radius: Union[float, Sequence[float], Mapping[int, float]],
    origin=(0.0, 0.0),
    max_range: Optional[float] = None,
) -> InflationResult:
    """
    膨脹 agent 並計算切點

    Args:
        agents: 具有 agent_id 與 position 的物件（AgentEstimate 或 AgentPoint）
        safety_radius: 單一半徑、與 agents 對齊的序列，或 id -> 半徑
        origin: 機器人位置
        max_range: 若提供，整個膨脹圓都在此距離外的 agent 不列入（不在量測內）

    Returns:
        InflationResult；距離不大於膨脹半徑的 agent 會被排除並記錄在 flagged_ids
    """
    origin = np.asarray(origin, dtype=float)
    inflated: List[InflatedAgent] = []
    flagged: List[int] = []
    for index, agent in enumerate(agents):
        radius = _radius_for(agent.agent_id, index, safety_radius)
        center = np.asarray(agent.position, dtype=float) - origin
        distance = float(np.hypot(*center))
        if max_range is not None and distance - radius > max_range:
            continue
        if distance <= radius:
            flagged.append(agent.agent_id)
            continue
        left, right = tangent_points(center, radius)
        inflated.append(InflatedAgent(agent.agent_id, frozen_array(center), radius, left, right))

    if flagged:
        logger.debug("agents inside inflation radius: %s", flagged)
    return InflationResult(tuple(inflated), tuple(flagged))


# ========================================
# 間隙偵測
# ========================================

def _virtual_agent(angle: float, d_max: float, parent: Tuple[int, int], index: int) -> InflatedAgent:
    # 以母配對與子間隙序號命名，agent 移動時名稱不變
    angle = wrap_angle(angle)
    center = d_max * np.array([np.cos(angle), np.sin(angle)])
    return InflatedAgent(f"v{parent[0]}-{parent[1]}.{index}", frozen_array(center), 0.0,
                         (angle, d_max), (angle, d_max), virtual=True)


def sentinel_gap(origin, goal, d_max: float) -> Gap:
    """少於兩個 agent 時使用的直線 sentinel 間隙"""
    origin = np.asarray(origin, dtype=float)
    offset = np.asarray(goal, dtype=float) - origin
    bearing = float(np.arctan2(offset[1], offset[0]))
    back = wrap_angle(bearing + np.pi)
    gap = Gap(
        gap_key=SENTINEL_KEY,
        right=(back, d_max),
        left=(back, d_max),
        flanking_ids=(),
        origin=frozen_array(origin),
        range_diff=0.0,
        angle_diff=TWO_PI,
        sentinel=True,
    )
    return replace(gap, goal=gap_goal(gap, goal))


def gap_conditions(range_diff: float, angle_diff: float, r_ins: float, theta_thre: float) -> Tuple[bool, bool]:
    """兩個偵測條件：(距離差 > 2·r_ins, 角度差 > θ_thre)"""
    return range_diff > 2.0 * r_ins, angle_diff > theta_thre


def detect_gaps(
    inflated: Union[InflationResult, Sequence[InflatedAgent]],
    params: GapConfig,
    d_max: float,
    goal,
    origin=(0.0, 0.0),
) -> List[Gap]:
    """
    順時針掃描相鄰 agent 配對並取出間隙

    Args:
        inflated: 膨脹後的 agent（順序不限，內部依方位角排序）
        params: r_ins、θ_thre、virtual_interval、條件組合模式
        d_max: 感測距離（虛擬 agent 放在此距離）
        goal: 全域目標（世界座標）
        origin: 機器人位置

    Returns:
        間隙列表；少於兩個 agent 時為單一 sentinel 間隙
    """
    origin = np.asarray(origin, dtype=float)
    agents = [a for a in inflated if not a.virtual]
    if len(agents) <= 1:
        return [sentinel_gap(origin, goal, d_max)]

    # 方位角遞減 = 順時針
    ordered = sorted(agents, key=lambda a: (-a.bearing, str(a.agent_id)))
    gaps: List[Gap] = []
    for i, previous in enumerate(ordered):
        following = ordered[(i + 1) % len(ordered)]
        right = previous.right_tangent
        left = following.left_tangent
        separation = float(np.mod(previous.bearing - following.bearing, TWO_PI))
        if separation == 0.0 and i == len(ordered) - 1:
            # 所有 agent 同方位時，繞回的配對涵蓋整圈
            separation = TWO_PI
        width = separation - previous.half_angle - following.half_angle
        range_diff = abs(left[1] - right[1])
        range_ok, angle_ok = gap_conditions(range_diff, width, params.r_ins, params.theta_thre)

        if params.gap_condition_mode == "both":
            is_open = range_ok and angle_ok
        else:
            is_open = (range_ok or angle_ok) and width > 0
        if not is_open:
            continue

        parent = (previous.agent_id, following.agent_id)
        boundaries: List[InflatedAgent] = [previous]
        n_virtual = int(np.floor(width / params.virtual_interval))
        for m in range(1, n_virtual + 1):
            boundaries.append(_virtual_agent(right[0] - width * m / (n_virtual + 1), d_max, parent, m))
        boundaries.append(following)

        for a, b in zip(boundaries[:-1], boundaries[1:]):
            gap = Gap(
                gap_key=f"{a.key}|{b.key}",
                right=a.right_tangent,
                left=b.left_tangent,
                flanking_ids=(a.agent_id, b.agent_id),
                origin=frozen_array(origin),
                range_diff=range_diff,
                angle_diff=width,
                parent_ids=parent,
            )
            gaps.append(replace(gap, goal=gap_goal(gap, goal, params.goal_bias)))

    return gaps


def gap_goal(gap: Gap, global_goal, goal_bias: float = 0.3) -> np.ndarray:
    """
    間隙的局部目標

    角度取兩端點的角平分線，距離取兩端點距離較小者；若全域目標方位在
    間隙內，角度往目標方位偏移 goal_bias 比例。sentinel 間隙的目標為
    夾在感測距離上的全域目標。

    Args:
        gap: 間隙
        global_goal: 全域目標（世界座標）
        goal_bias: 往目標方位偏移的比例

    Returns:
        世界座標中的局部目標
    """
    origin = np.asarray(gap.origin, dtype=float)
    offset = np.asarray(global_goal, dtype=float) - origin
    goal_distance = float(np.hypot(*offset))
    goal_bearing = float(np.arctan2(offset[1], offset[0]))

    if gap.sentinel:
        reach = min(goal_distance, gap.region_radius)
        if goal_distance == 0.0:
            return frozen_array(origin)
        return frozen_array(origin + offset * (reach / goal_distance))

    width = gap.width
    angle = gap.left[0] + 0.5 * width
    if gap.contains_bearing(goal_bearing):
        goal_offset = float(np.mod(goal_bearing - gap.left[0], TWO_PI))
        angle += goal_bias * (goal_offset - 0.5 * width)
    reach = min(gap.right[1], gap.left[1], goal_distance) if gap.contains_bearing(goal_bearing) \
        else min(gap.right[1], gap.left[1])
    return frozen_array(origin + reach * np.array([np.cos(angle), np.sin(angle)]))
