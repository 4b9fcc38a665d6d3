"""
H-DAGap 流程模組
感測/估測 → 規劃（DAGap → 不確定性 → CFS → 評分）→ SSA 追蹤，
執行 k 步或軌跡用完後重新規劃

提供兩種執行方式：
- 序列模式：以 LangGraph 工作流 perceive → plan → execute → (plan | END) 表達，結果可逐位元重現
- 執行緒模式：規劃執行緒與控制迴圈以 SnapshotCell 交換不可變快照
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from langgraph.graph import END

from ..core.config import NavigationConfig
from ..core.errors import NoCandidateError, PlannerFailedError, SingularGeometryError
from ..core.state import BaseState, create_state
from ..core.workflow import WorkflowBuilder, create_outcome_router
from .cfs_opt import ScoredTrajectory, optimize_candidate, preselect, reference_only
from .dagap import PlanningSnapshot, Trajectory, static_predictions, straight_line_trajectory, synthesize
from .estimation import AgentEstimate, AgentTracker, predict, sense
from .ssa_ctrl import SafeController, SsaTelemetry, reference_control
from .uncertainty import build_schedules, combine_replan_step
from .world_sim import WorldSimulator, WorldState, check_collision, goal_reached

logger = logging.getLogger(__name__)


class PipelineMode(str, Enum):
    """消融實驗的四種模式"""
    SGAP = "sgap"
    DAGAP = "dagap"
    DAGAP_CFS = "dagap-cfs"
    FULL = "full"

    @property
    def uses_prediction(self) -> bool:
        return self is not PipelineMode.SGAP

    @property
    def uses_cfs(self) -> bool:
        return self in (PipelineMode.DAGAP_CFS, PipelineMode.FULL)

    @property
    def uses_uncertainty(self) -> bool:
        return self.uses_cfs

    @property
    def uses_ssa(self) -> bool:
        return self is PipelineMode.FULL


class Outcome(str, Enum):
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class PlanResult:
    """單次規劃的結果（發布後不可變）"""
    trajectory: Trajectory
    replan_step: int
    plan_tick: int
    timings: Dict[str, float]
    candidates: Tuple[ScoredTrajectory, ...] = ()
    feasible: bool = True
    sentinel: bool = False

    def waypoint_for(self, tick: int, dt: float = 1.0) -> Tuple[np.ndarray, np.ndarray, bool]:
        """
        依 (tick − plan_tick) 取得下一個追蹤點

        Returns:
            (waypoint, 前饋速度, 軌跡是否已用完)；用完時停在最後一點
        """
        waypoints = self.trajectory.waypoints
        j = tick - self.plan_tick
        if j + 1 >= len(waypoints):
            return waypoints[-1], np.zeros(2), True
        return waypoints[j + 1], (waypoints[j + 1] - waypoints[j]) / dt, False


@dataclass
class RunRecord:
    """單一 episode 的結果"""
    outcome: Outcome
    steps: int
    seed: int
    mode: PipelineMode
    collision_tick: Optional[int] = None
    collision_agent_ids: Tuple[int, ...] = ()
    collision_events: int = 0
    reached_goal: bool = False
    plans: int = 0
    cfs_attempts: int = 0
    cfs_feasible: int = 0
    ssa_fallbacks: int = 0
    timings: Dict[str, List[float]] = field(default_factory=lambda: {"dagap": [], "cfs": [], "ssa": []})
    trace: Optional[List[WorldState]] = None

    def mean_timings(self) -> Dict[str, float]:
        return {stage: float(np.mean(values)) if values else 0.0 for stage, values in self.timings.items()}


def trial_seed(base_seed: int, trial: int) -> int:
    """每個 trial 的種子 = base ⊕ trial"""
    return int(base_seed) ^ int(trial)


# ========================================
# 規劃
# ========================================

def make_snapshot(world: WorldState, estimates: Sequence[AgentEstimate], config: NavigationConfig) -> PlanningSnapshot:
    """以目前估測建立規劃快照"""
    horizon = config.planner.horizon
    dt = config.scenario.dt
    return PlanningSnapshot(
        robot_position=world.robot.position,
        goal=world.goal,
        predictions=tuple(predict(e, horizon, dt) for e in estimates),
        horizon=horizon,
        dt=dt,
        sensing_range=config.scenario.sensing_range,
        tick=world.tick,
    )


class Planner:
    """
    高階規劃器

    使用範例:
    ```python
    planner = Planner(config, PipelineMode.FULL)
    result = planner.plan_once(make_snapshot(world, estimates, config))
    ```
    """

    def __init__(self, config: NavigationConfig, mode: PipelineMode = PipelineMode.FULL):
        self.config = config
        self.mode = PipelineMode(mode)

    def plan_once(self, snapshot: PlanningSnapshot) -> PlanResult:
        """
        DAGap 合成 → 不確定性排程 → 預選前兩名 → CFS → 評分

        Returns:
            分數最高的可行軌跡與其 k；全部不可行時回傳分數最高的參考軌跡且 k = 1
        """
        config = self.config
        horizon = snapshot.horizon
        v_max = config.v_max
        r_ins = config.gaps.r_ins

        schedules = None
        replan_step = horizon
        if self.mode.uses_uncertainty:
            schedules = build_schedules(snapshot.predictions, config.confidence, r_ins, config.d_safe_max)
            replan_step = combine_replan_step(schedules, horizon)

        synth_snapshot = snapshot
        if not self.mode.uses_prediction:
            synth_snapshot = PlanningSnapshot(
                robot_position=snapshot.robot_position,
                goal=snapshot.goal,
                predictions=static_predictions(snapshot.predictions),
                horizon=horizon,
                dt=snapshot.dt,
                sensing_range=snapshot.sensing_range,
                tick=snapshot.tick,
            )

        start = time.perf_counter()
        trajectories = synthesize(synth_snapshot, schedules, config.gaps, config.planner, v_max)
        dagap_time = time.perf_counter() - start

        sentinel = False
        try:
            candidates = preselect(trajectories, snapshot.goal)
        except NoCandidateError:
            logger.debug("all gaps closed over the horizon, replanning with sentinel")
            candidates = [straight_line_trajectory(snapshot.robot_position, snapshot.goal, horizon, v_max * snapshot.dt)]
            sentinel = True

        start = time.perf_counter()
        if self.mode.uses_cfs:
            scored = [
                optimize_candidate(c, snapshot.predictions, schedules, r_ins, config.cfs,
                                   snapshot.goal, v_max, snapshot.dt, config.qp)
                for c in candidates
            ]
        else:
            scored = [reference_only(c, snapshot.goal, v_max, config.cfs, snapshot.dt) for c in candidates]
        cfs_time = time.perf_counter() - start

        ranked = sorted(scored, key=lambda s: (-s.J, s.trajectory.gap_key))
        feasible = [s for s in ranked if s.feasible]
        if feasible:
            chosen, feasible_plan = feasible[0].trajectory, True
        else:
            logger.info("no feasible candidate at tick %d, tracking best reference", snapshot.tick)
            chosen, feasible_plan = ranked[0].reference, False
            replan_step = 1

        return PlanResult(
            trajectory=chosen,
            replan_step=max(1, min(replan_step, horizon)),
            plan_tick=snapshot.tick,
            timings={"dagap": dagap_time, "cfs": cfs_time},
            candidates=tuple(scored),
            feasible=feasible_plan,
            sentinel=sentinel or chosen.gap_key == "sentinel",
        )


# ========================================
# Episode（序列模式）
# ========================================

EpisodeState = create_state({"steps_since_plan": int}, name="EpisodeState")


class EpisodeRunner:
    """
    單一 episode 的執行環境

    持有模擬器、追蹤器、規劃器與控制器；序列模式的 LangGraph 節點是此類別的方法。

    使用範例:
    ```python
    runner = EpisodeRunner(config, PipelineMode.FULL, seed=7)
    record = runner.run()
    ```
    """

    def __init__(self, config: NavigationConfig, mode: PipelineMode = PipelineMode.FULL, seed: Optional[int] = None):
        self.config = config
        self.mode = PipelineMode(mode)
        self.seed = config.scenario.rng_seed if seed is None else int(seed)

        sensor_seq = np.random.SeedSequence(self.seed).spawn(3)[2]
        self.simulator = WorldSimulator(config.scenario, seed=self.seed)
        self.sensor_rng = np.random.default_rng(sensor_seq)
        self.tracker = AgentTracker(config.estimator, dt=config.scenario.dt)
        self.planner = Planner(config, self.mode)
        self.controller = SafeController(config) if self.mode.uses_ssa else None

        self.record = RunRecord(outcome=Outcome.TIMEOUT, steps=0, seed=self.seed, mode=self.mode)
        if config.run.record_trace:
            self.record.trace = []
        self._in_contact: set = set()
        self._graph_builder: Optional[WorkflowBuilder] = None

    # ----------------------------------------
    # 共用步驟
    # ----------------------------------------

    def sense_and_track(self, world: WorldState) -> Tuple[AgentEstimate, ...]:
        scenario = self.config.scenario
        scan = sense(world, scenario.measurement_noise_std, scenario.sensing_range,
                     self.sensor_rng, self.config.estimator.bearing_noise_std)
        return self.tracker.update(scan, world.tick)

    def control(self, world: WorldState, estimates, plan: PlanResult) -> Tuple[np.ndarray, bool]:
        """回傳 (控制輸入, 軌跡是否已用完)"""
        waypoint, feedforward, exhausted = plan.waypoint_for(world.tick, self.config.scenario.dt)
        u_ref = reference_control(world.robot, waypoint, self.config.controller, feedforward)
        if self.controller is None:
            return u_ref, exhausted

        start = time.perf_counter()
        try:
            u, telemetry = self.controller.filter(world.robot, estimates, u_ref)
        except SingularGeometryError:
            # 估測位置與機器人重合：已在接觸中，這個 tick 不施加控制
            logger.warning("robot on an agent estimate at tick %d, zero control", world.tick)
            self.record.ssa_fallbacks += 1
            return np.zeros_like(u_ref), exhausted
        self.record.timings["ssa"].append(time.perf_counter() - start)
        self._note_ssa(telemetry)
        return u, exhausted

    def _note_ssa(self, telemetry: SsaTelemetry) -> None:
        if telemetry.fallback:
            self.record.ssa_fallbacks += 1

    def note_plan(self, plan: PlanResult) -> None:
        self.record.plans += 1
        self.record.timings["dagap"].append(plan.timings["dagap"])
        if self.mode.uses_cfs:
            self.record.timings["cfs"].append(plan.timings["cfs"])
            self.record.cfs_attempts += len(plan.candidates)
            self.record.cfs_feasible += sum(1 for c in plan.candidates if c.feasible)

    def advance(self, world: WorldState, u) -> Tuple[WorldState, Optional[Outcome]]:
        """
        推進一個 tick：機器人、agent、碰撞與終止判斷

        Returns:
            (新世界, 結束狀態或 None)
        """
        world = self.simulator.step_robot(world, u)
        world = self.simulator.step_agents(world)
        self.record.steps = world.tick
        if self.record.trace is not None:
            self.record.trace.append(world)

        report = check_collision(world)
        new_contacts = set(report.agent_ids) - self._in_contact
        self._in_contact = set(report.agent_ids)
        if new_contacts:
            self.record.collision_events += len(new_contacts)
            if self.record.collision_tick is None:
                self.record.collision_tick = world.tick
                self.record.collision_agent_ids = report.agent_ids
                logger.debug("collision at tick %d with %s", world.tick, report.agent_ids)
            if self.config.run.stop_on_collision:
                return world, Outcome.COLLISION

        if goal_reached(world, self.config.scenario.goal_radius):
            self.record.reached_goal = True
            return world, self._final_outcome(default=Outcome.SUCCESS)
        if world.tick >= self.config.scenario.step_budget:
            return world, self._final_outcome(default=Outcome.TIMEOUT)
        return world, None

    def _final_outcome(self, default: Outcome) -> Outcome:
        return Outcome.COLLISION if self.record.collision_events else default

    # ----------------------------------------
    # LangGraph 節點
    # ----------------------------------------

    def perceive(self, state: BaseState) -> dict:
        world = self.simulator.spawn()
        if self.record.trace is not None:
            self.record.trace.append(world)
        return {"tick": world.tick, "world": world, "estimates": self.sense_and_track(world),
                "outcome": None, "plan_count": 0}

    def plan(self, state: BaseState) -> dict:
        snapshot = make_snapshot(state["world"], state["estimates"], self.config)
        result = self.planner.plan_once(snapshot)
        self.note_plan(result)
        return {"plan": result, "plan_count": state.get("plan_count", 0) + 1}

    def execute(self, state: BaseState) -> dict:
        world, estimates, plan = state["world"], state["estimates"], state["plan"]
        outcome = None
        steps = 0
        while steps < plan.replan_step:
            u, exhausted = self.control(world, estimates, plan)
            if exhausted:
                break
            world, outcome = self.advance(world, u)
            estimates = self.sense_and_track(world)
            steps += 1
            if outcome is not None:
                break
        if steps == 0 and outcome is None:
            # 新軌跡只有一個 waypoint：原地煞車一步，避免規劃迴圈空轉
            u, _ = self.control(world, estimates, plan)
            world, outcome = self.advance(world, u)
            estimates = self.sense_and_track(world)
            steps = 1
        return {"tick": world.tick, "world": world, "estimates": estimates,
                "outcome": outcome.value if outcome else None, "steps_since_plan": steps}

    def build_graph(self) -> WorkflowBuilder:
        """perceive → plan → execute → (plan | END)"""
        if self._graph_builder is None:
            builder = WorkflowBuilder(EpisodeState)
            builder.add_node("perceive", self.perceive)
            builder.add_node("plan", self.plan)
            builder.add_node("execute", self.execute)
            builder.set_entry_point("perceive")
            builder.add_edge("perceive", "plan")
            builder.add_edge("plan", "execute")
            builder.add_conditional_edge("execute", create_outcome_router("continue"),
                                         {"continue": "plan", END: END})
            self._graph_builder = builder
        return self._graph_builder

    def run(self) -> RunRecord:
        """執行整個 episode（執行緒模式由 config.run.threaded 決定）"""
        if self.config.run.threaded:
            return run_threaded(self)

        # 每次 execute 至少推進一個 tick，迴圈圈數不超過步數上限
        final = self.build_graph().invoke({"tick": 0, "outcome": None},
                                          max_cycles=self.config.scenario.step_budget)
        self.record.outcome = Outcome(final["outcome"])
        return self.record


# ========================================
# 執行緒模式
# ========================================

class SnapshotCell:
    """
    不可變快照的原子交換格

    寫入端以 publish 取代整個值；讀取端取得 (值, 版本)。
    """

    def __init__(self, value: Any = None):
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._value = value
        self._version = 0

    def publish(self, value: Any) -> int:
        with self._changed:
            self._value = value
            self._version += 1
            self._changed.notify_all()
            return self._version

    def latest(self) -> Tuple[Any, int]:
        with self._lock:
            return self._value, self._version

    def wait_newer(self, version: int, timeout: Optional[float] = None) -> Tuple[Any, int]:
        """等到版本大於 version（或逾時）"""
        with self._changed:
            self._changed.wait_for(lambda: self._version > version, timeout=timeout)
            return self._value, self._version


@dataclass(frozen=True)
class PlannerFailure:
    """規劃執行緒發布到計畫交換格的失敗訊號"""
    error: BaseException


def _planner_worker(planner: Planner, requests: SnapshotCell, plans: SnapshotCell, stop: threading.Event) -> None:
    seen = 0
    while not stop.is_set():
        snapshot, version = requests.wait_newer(seen, timeout=0.05)
        if version <= seen or snapshot is None:
            continue
        seen = version
        try:
            plan = planner.plan_once(snapshot)
        except Exception as e:
            logger.exception("planner failed at tick %d", snapshot.tick)
            plans.publish(PlannerFailure(e))
            return
        plans.publish(plan)


def _accept_plan(value: Any) -> PlanResult:
    if isinstance(value, PlannerFailure):
        raise PlannerFailedError(f"規劃執行緒失敗: {value.error!r}") from value.error
    return value


def run_threaded(runner: EpisodeRunner) -> RunRecord:
    """
    規劃執行緒 + 控制迴圈

    控制迴圈每個 tick 做估測與追蹤；需要重新規劃時發布快照，
    新計畫發布前繼續追蹤舊計畫（以 tick − plan_tick 取 waypoint），用完則停在最後一點。
    規劃執行緒失敗（或第一個計畫逾時）時拋出 PlannerFailedError。
    """
    config = runner.config
    requests, plans = SnapshotCell(), SnapshotCell()
    stop = threading.Event()
    worker = threading.Thread(target=_planner_worker, args=(runner.planner, requests, plans, stop),
                              name="planner", daemon=True)
    worker.start()

    try:
        world = runner.simulator.spawn()
        if runner.record.trace is not None:
            runner.record.trace.append(world)
        estimates = runner.sense_and_track(world)

        requests.publish(make_snapshot(world, estimates, config))
        plan, plan_version = plans.wait_newer(0, timeout=config.run.planner_timeout_s)
        if plan_version == 0:
            raise PlannerFailedError(f"規劃執行緒 {config.run.planner_timeout_s} 秒內沒有發布計畫")
        plan = _accept_plan(plan)
        runner.note_plan(plan)
        pending = False

        outcome = None
        while outcome is None:
            latest, version = plans.latest()
            if version > plan_version:
                plan, plan_version, pending = _accept_plan(latest), version, False
                runner.note_plan(plan)

            u, exhausted = runner.control(world, estimates, plan)
            due = exhausted or world.tick - plan.plan_tick >= plan.replan_step
            if due and not pending:
                requests.publish(make_snapshot(world, estimates, config))
                pending = True

            world, outcome = runner.advance(world, u)
            estimates = runner.sense_and_track(world)
            if config.run.tick_period_s > 0:
                time.sleep(config.run.tick_period_s)
    finally:
        stop.set()
        worker.join(timeout=5.0)

    runner.record.outcome = outcome
    return runner.record


# ========================================
# 入口
# ========================================

def run_episode(
    config: NavigationConfig,
    mode: PipelineMode = PipelineMode.FULL,
    seed: Optional[int] = None,
) -> RunRecord:
    """
    執行單一 episode

    Args:
        config: 導航配置
        mode: 消融模式
        seed: 種子，預設為 config.scenario.rng_seed

    Returns:
        RunRecord
    """
    return EpisodeRunner(config, mode, seed).run()


@dataclass(frozen=True)
class AblationResult:
    """單一模式的消融統計"""
    mode: PipelineMode
    n_agents: int
    trials: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    records: Tuple[RunRecord, ...]


def summarize_records(mode: PipelineMode, n_agents: int, records: Sequence[RunRecord]) -> AblationResult:
    trials = len(records)
    counts = {o: sum(1 for r in records if r.outcome is o) for o in Outcome}
    return AblationResult(
        mode=PipelineMode(mode),
        n_agents=n_agents,
        trials=trials,
        success_rate=counts[Outcome.SUCCESS] / trials,
        collision_rate=counts[Outcome.COLLISION] / trials,
        timeout_rate=counts[Outcome.TIMEOUT] / trials,
        records=tuple(records),
    )


def run_ablation(
    config: NavigationConfig,
    mode: PipelineMode,
    trials: int,
    base_seed: Optional[int] = None,
) -> AblationResult:
    """
    以同一組種子序列執行 trials 次並統計成功率與碰撞率

    Args:
        config: 導航配置
        mode: 消融模式
        trials: 次數（至少 1）
        base_seed: 基底種子，預設為 config.scenario.rng_seed

    Returns:
        AblationResult
    """
    if trials < 1:
        raise ValueError("trials 至少為 1")
    base = config.scenario.rng_seed if base_seed is None else base_seed
    records = [run_episode(config, mode, trial_seed(base, i)) for i in range(trials)]
    return summarize_records(mode, config.scenario.n_agents, records)
