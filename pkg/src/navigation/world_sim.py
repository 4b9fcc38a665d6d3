"""
世界模擬模組
2×2 世界的 ground truth：agent 隨機運動、二階機器人動力學、碰撞偵測
"""

import csv
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.config import ScenarioConfig
from ..core.errors import ConfigError

logger = logging.getLogger(__name__)

ROBOT_ENTITY_ID = -1
MAX_SPAWN_ATTEMPTS = 10_000  # 每個 agent


def frozen_array(values) -> np.ndarray:
    """回傳唯讀的 float64 陣列，讓快照可以安全地跨執行緒傳遞"""
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def wrap_angle(angle: float) -> float:
    """將角度包裹到 (-π, π]"""
    return float(np.pi - np.mod(np.pi - angle, 2.0 * np.pi))


class RobotModel(str, Enum):
    """機器人動力學模型"""
    SECOND_ORDER_UNICYCLE = "second_order_unicycle"
    DOUBLE_INTEGRATOR = "double_integrator"


class BoundaryPolicy(str, Enum):
    REFLECT = "reflect"
    WRAP = "wrap"


@dataclass(frozen=True)
class AgentTruth:
    """Agent 的 ground truth 狀態"""
    id: int
    position: np.ndarray
    velocity: np.ndarray
    radius: float

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True)
class RobotState:
    """
    機器人狀態

    兩種模型共用同一個表示：double integrator 的速度向量等於
    linear_speed·(cos heading, sin heading)，angular_speed 恆為 0。
    """
    position: np.ndarray
    heading: float
    linear_speed: float
    angular_speed: float = 0.0
    model: RobotModel = RobotModel.DOUBLE_INTEGRATOR

    @property
    def velocity(self) -> np.ndarray:
        return self.linear_speed * np.array([np.cos(self.heading), np.sin(self.heading)])


@dataclass(frozen=True)
class WorldState:
    """單一模擬 tick 的完整快照（不可變）"""
    tick: int
    robot: RobotState
    agents: Tuple[AgentTruth, ...]
    bounds: Tuple[float, float, float, float]
    goal: np.ndarray

    def agent_positions(self) -> np.ndarray:
        if not self.agents:
            return np.zeros((0, 2))
        return np.array([a.position for a in self.agents])


@dataclass(frozen=True)
class CollisionReport:
    """碰撞報告：與機器人接觸的 agent id"""
    tick: int
    agent_ids: Tuple[int, ...]

    @property
    def collided(self) -> bool:
        return bool(self.agent_ids)


# ========================================
# 情境生成
# ========================================

def _sample_positions(
    rng: np.random.Generator,
    n: int,
    bounds: Tuple[float, float, float, float],
    keep_out: Sequence[np.ndarray],
    clearance: float,
) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    positions = np.empty((n, 2))
    for i in range(n):
        for _ in range(MAX_SPAWN_ATTEMPTS):
            candidate = rng.uniform((xmin, ymin), (xmax, ymax))
            if all(np.hypot(*(candidate - p)) >= clearance for p in keep_out):
                break
        else:
            raise ConfigError(
                f"spawn_clearance={clearance} 過大：{MAX_SPAWN_ATTEMPTS} 次取樣都落在起點或目標附近"
            )
        positions[i] = candidate
    return positions


def spawn_scenario(config: ScenarioConfig, rng: Optional[np.random.Generator] = None) -> WorldState:
    """
    依配置建立初始世界

    Args:
        config: 情境配置
        rng: 亂數產生器，預設以 config.rng_seed 建立

    Returns:
        tick 0 的 WorldState
    """
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    start = frozen_array(config.robot_start)
    goal = frozen_array(config.goal)

    keep_out = [start, goal] if config.spawn_clearance > 0 else []
    positions = _sample_positions(rng, config.n_agents, config.bounds, keep_out, config.spawn_clearance)
    headings = rng.uniform(0.0, 2.0 * np.pi, size=config.n_agents)
    speeds = rng.uniform(*config.agent_speed_range, size=config.n_agents)

    agents = tuple(
        AgentTruth(
            id=i,
            position=frozen_array(positions[i]),
            velocity=frozen_array(speeds[i] * np.array([np.cos(headings[i]), np.sin(headings[i])])),
            radius=config.agent_radius,
        )
        for i in range(config.n_agents)
    )

    toward_goal = np.arctan2(goal[1] - start[1], goal[0] - start[0])
    robot = RobotState(
        position=start,
        heading=wrap_angle(toward_goal),
        linear_speed=0.0,
        model=RobotModel(config.robot_model),
    )
    return WorldState(tick=0, robot=robot, agents=agents, bounds=config.bounds, goal=goal)


# ========================================
# Agent 運動
# ========================================

def _apply_boundary(position: np.ndarray, velocity: np.ndarray, bounds, policy: BoundaryPolicy):
    lo = np.array(bounds[:2])
    hi = np.array(bounds[2:])
    position = position.copy()
    velocity = velocity.copy()
    if policy is BoundaryPolicy.WRAP:
        position = lo + np.mod(position - lo, hi - lo)
        return position, velocity

    for axis in range(2):
        # 大步長時可能需要多次鏡射
        while position[axis] > hi[axis] or position[axis] < lo[axis]:
            if position[axis] > hi[axis]:
                position[axis] = 2.0 * hi[axis] - position[axis]
            else:
                position[axis] = 2.0 * lo[axis] - position[axis]
            velocity[axis] = -velocity[axis]
    return position, velocity


def step_agents(
    world: WorldState,
    rng: Optional[np.random.Generator] = None,
    heading_noise_std: float = 0.1,
    boundary_policy: Union[BoundaryPolicy, str] = BoundaryPolicy.REFLECT,
) -> WorldState:
    """
    所有 agent 前進一步

    位置 += 速度，接著套用邊界策略，最後以零均值高斯擾動方向（速率不變）。
    agent 之間的重疊不處理。

    Args:
        world: 目前世界
        rng: 方向擾動用的亂數產生器（heading_noise_std 為 0 時可省略）
        heading_noise_std: 每步方向擾動標準差（rad）
        boundary_policy: reflect 或 wrap

    Returns:
        下一個 tick 的 WorldState（機器人不變）
    """
    policy = BoundaryPolicy(boundary_policy)
    n = len(world.agents)
    perturb = heading_noise_std > 0 and n > 0
    if perturb:
        if rng is None:
            raise ValueError("heading_noise_std > 0 時需要提供 rng")
        turns = rng.normal(0.0, heading_noise_std, size=n)

    agents = []
    for idx, agent in enumerate(world.agents):
        position = agent.position + agent.velocity
        position, velocity = _apply_boundary(position, np.asarray(agent.velocity), world.bounds, policy)
        if perturb:
            c, s = np.cos(turns[idx]), np.sin(turns[idx])
            velocity = np.array([c * velocity[0] - s * velocity[1], s * velocity[0] + c * velocity[1]])
        agents.append(replace(agent, position=frozen_array(position), velocity=frozen_array(velocity)))

    return replace(world, tick=world.tick + 1, agents=tuple(agents))


# ========================================
# 機器人動力學
# ========================================

def step_robot(
    state: RobotState,
    control: Sequence[float],
    dt: float = 1.0,
    v_max: float = 2e-2,
    omega_max: float = 0.3,
) -> RobotState:
    """
    半隱式 Euler 積分（先更新速度再更新位置）

    Args:
        state: 目前機器人狀態
        control: double integrator 為 (ax, ay)；unicycle 為 (線加速度, 角加速度)
        dt: 時間步長
        v_max: 最大線速度
        omega_max: unicycle 最大角速度

    Returns:
        新的 RobotState，linear_speed 夾在 [0, v_max]
    """
    u = np.asarray(control, dtype=float)
    if u.shape != (2,):
        raise ValueError(f"控制輸入維度必須為 2，收到 {u.shape}")

    if state.model is RobotModel.DOUBLE_INTEGRATOR:
        velocity = state.velocity + u * dt
        speed = float(np.hypot(*velocity))
        if speed > v_max:
            velocity = velocity * (v_max / speed)
            speed = v_max
        heading = wrap_angle(np.arctan2(velocity[1], velocity[0])) if speed > 0 else state.heading
        position = state.position + velocity * dt
        return replace(state, position=frozen_array(position), heading=heading,
                       linear_speed=speed, angular_speed=0.0)

    omega = float(np.clip(state.angular_speed + u[1] * dt, -omega_max, omega_max))
    speed = float(np.clip(state.linear_speed + u[0] * dt, 0.0, v_max))
    heading = wrap_angle(state.heading + omega * dt)
    position = state.position + speed * dt * np.array([np.cos(heading), np.sin(heading)])
    return replace(state, position=frozen_array(position), heading=heading,
                   linear_speed=speed, angular_speed=omega)


# ========================================
# 碰撞偵測
# ========================================

def check_collision(world: WorldState) -> CollisionReport:
    """
    回報與機器人接觸的 agent

    機器人視為點：距離嚴格小於 agent 半徑才算碰撞，恰好等於半徑是安全的。
    """
    if not world.agents:
        return CollisionReport(tick=world.tick, agent_ids=())
    positions = world.agent_positions()
    radii = np.array([a.radius for a in world.agents])
    distances = np.hypot(*(positions - world.robot.position).T)
    hits = tuple(int(a.id) for a, hit in zip(world.agents, distances < radii) if hit)
    return CollisionReport(tick=world.tick, agent_ids=hits)


def goal_reached(world: WorldState, goal_radius: float) -> bool:
    return float(np.hypot(*(world.robot.position - world.goal))) <= goal_radius


# ========================================
# 模擬器
# ========================================

class WorldSimulator:
    """
    世界模擬器

    綁定情境配置與 agent 運動的亂數串流，提供 spawn/step/rollout。

    使用範例:
    ```python
    sim = WorldSimulator(ScenarioConfig(n_agents=20, rng_seed=7))
    world = sim.spawn()
    world = sim.step_agents(world)
    ```
    """

    def __init__(self, config: ScenarioConfig, seed: Optional[int] = None):
        self.config = config
        seed = config.rng_seed if seed is None else seed
        spawn_seq, motion_seq = np.random.SeedSequence(seed).spawn(2)
        self._spawn_rng = np.random.default_rng(spawn_seq)
        self._motion_rng = np.random.default_rng(motion_seq)

    def spawn(self) -> WorldState:
        return spawn_scenario(self.config, self._spawn_rng)

    def step_agents(self, world: WorldState) -> WorldState:
        return step_agents(
            world,
            rng=self._motion_rng,
            heading_noise_std=self.config.heading_noise_std,
            boundary_policy=self.config.boundary_policy,
        )

    def step_robot(self, world: WorldState, control: Sequence[float]) -> WorldState:
        robot = step_robot(
            world.robot, control,
            dt=self.config.dt, v_max=self.config.v_max, omega_max=self.config.omega_max,
        )
        return replace(world, robot=robot)

    def rollout(self, steps: int, world: Optional[WorldState] = None) -> List[WorldState]:
        """在機器人靜止的情況下推進 agent，回傳包含初始狀態的所有影格"""
        world = world if world is not None else self.spawn()
        frames = [world]
        for _ in range(steps):
            world = self.step_agents(world)
            frames.append(world)
        return frames


# ========================================
# CSV 軌跡
# ========================================

TRACE_COLUMNS = ("tick", "entity_id", "x", "y", "vx", "vy")


def write_trace_csv(frames: Iterable[WorldState], path: Union[str, Path]) -> Path:
    """將影格寫成 CSV（機器人的 entity_id 為 -1）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for frame in frames:
            rv = frame.robot.velocity
            writer.writerow([frame.tick, ROBOT_ENTITY_ID, repr(float(frame.robot.position[0])),
                             repr(float(frame.robot.position[1])), repr(float(rv[0])), repr(float(rv[1]))])
            for agent in frame.agents:
                writer.writerow([frame.tick, agent.id,
                                 repr(float(agent.position[0])), repr(float(agent.position[1])),
                                 repr(float(agent.velocity[0])), repr(float(agent.velocity[1]))])
    return path


def read_trace_csv(path: Union[str, Path]) -> np.ndarray:
    """讀回 CSV，回傳 (rows, 6) 陣列，欄位順序同 TRACE_COLUMNS"""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"CSV 欄位不符: {header}")
        rows = [[float(v) for v in row] for row in reader]
    return np.array(rows).reshape(-1, len(TRACE_COLUMNS))
