"""
實驗執行模組
多次 trial 的分派、結果紀錄（JSONL）、統計表與圖檔輸出

輸出目錄結構:
- trials.jsonl: 每個 trial 一行
- summary.json / summary.csv: 各模式的成功率、碰撞率與平均耗時
- plots/: 每個 trial 的 SVG 軌跡圖（--plots）
"""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .core.config import NavigationConfig
from .core.errors import NoCandidateError
from .navigation.cfs_opt import build_problem, optimize_candidate, preselect, safety_violations
from .navigation.dagap import PlanningSnapshot, straight_line_trajectory, synthesize
from .navigation.estimation import AgentEstimate, predict
from .navigation.pipeline import Outcome, PipelineMode, RunRecord, run_episode, trial_seed
from .navigation.uncertainty import build_schedules
from .navigation.world_sim import frozen_array, spawn_scenario, write_trace_csv
from .plots import emit_failure_snapshot, emit_plot

logger = logging.getLogger(__name__)

STAGES = ("dagap", "cfs", "ssa")
SUMMARY_COLUMNS = (
    "mode", "n_agents", "trials", "success_rate", "collision_rate", "timeout_rate",
    "mean_steps", "mean_dagap_s", "mean_cfs_s", "mean_ssa_s", "cfs_feasible_rate",
)


# ==================== 資料模型 ====================

class ExperimentSpec(BaseModel):
    """單一模式、單一 agent 數量的實驗設定"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: NavigationConfig = Field(default_factory=NavigationConfig, description="導航配置")
    mode: PipelineMode = Field(PipelineMode.FULL, description="消融模式")
    trials: int = Field(1, ge=1, description="trial 數量")
    workers: int = Field(1, ge=1, description="平行 worker 數量")
    base_seed: int = Field(0, ge=0, lt=2**64, description="基底種子")
    out_dir: Optional[Path] = Field(None, description="輸出目錄（None 表示不寫檔）")
    emit_plots: bool = Field(False, description="是否輸出每個 trial 的 SVG")

    @property
    def n_agents(self) -> int:
        return self.config.scenario.n_agents


class TrialRecord(BaseModel):
    """JSONL 中的一行"""
    trial: int
    seed: int
    mode: PipelineMode
    n_agents: int
    outcome: Outcome
    steps: int
    reached_goal: bool
    collision_tick: Optional[int] = None
    collision_agent_ids: List[int] = Field(default_factory=list)
    collision_events: int = 0
    plans: int = 0
    cfs_attempts: int = 0
    cfs_feasible: int = 0
    ssa_fallbacks: int = 0
    timings: Dict[str, float] = Field(default_factory=dict, description="各階段平均耗時（秒）")

    @classmethod
    def from_run(cls, trial: int, n_agents: int, record: RunRecord) -> "TrialRecord":
        return cls(
            trial=trial,
            seed=record.seed,
            mode=record.mode,
            n_agents=n_agents,
            outcome=record.outcome,
            steps=record.steps,
            reached_goal=record.reached_goal,
            collision_tick=record.collision_tick,
            collision_agent_ids=list(record.collision_agent_ids),
            collision_events=record.collision_events,
            plans=record.plans,
            cfs_attempts=record.cfs_attempts,
            cfs_feasible=record.cfs_feasible,
            ssa_fallbacks=record.ssa_fallbacks,
            timings=record.mean_timings(),
        )

    def deterministic_view(self) -> dict:
        """去掉耗時欄位後的內容（用於重現性比對）"""
        return self.model_dump(mode="json", exclude={"timings"})


class SummaryRow(BaseModel):
    mode: PipelineMode
    n_agents: int
    trials: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_steps: float
    mean_dagap_s: float = 0.0
    mean_cfs_s: float = 0.0
    mean_ssa_s: float = 0.0
    cfs_feasible_rate: Optional[float] = None


class SummaryTable(BaseModel):
    """各模式統計表"""
    rows: List[SummaryRow] = Field(default_factory=list)

    def format(self) -> str:
        header = f"{'mode':<10} {'agents':>6} {'trials':>6} {'success':>8} {'collision':>9} {'timeout':>8} {'steps':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.mode.value:<10} {r.n_agents:>6} {r.trials:>6} {r.success_rate:>8.1%} "
                f"{r.collision_rate:>9.1%} {r.timeout_rate:>8.1%} {r.mean_steps:>8.1f}"
            )
        return "\n".join(lines)

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        """寫出 summary.json 與 summary.csv"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "summary.json"
        json_path.write_text(self.model_dump_json(indent=2), encoding="utf-8")

        csv_path = out_dir / "summary.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row.model_dump(mode="json"))
        return json_path, csv_path


# ==================== 統計 ====================

def summarize(records: Sequence[TrialRecord]) -> SummaryRow:
    """
    由 trial 紀錄計算一列統計（同一模式、同一 agent 數量）

    平均耗時取各 trial 平均值的平均，因此可以只靠 JSONL 重新算出相同結果。
    """
    if not records:
        raise ValueError("至少需要一筆 trial 紀錄")
    trials = len(records)
    count = {o: sum(1 for r in records if r.outcome is o) for o in Outcome}

    def stage_mean(stage: str) -> float:
        values = [r.timings[stage] for r in records if r.timings.get(stage)]
        return float(np.mean(values)) if values else 0.0

    attempts = sum(r.cfs_attempts for r in records)
    return SummaryRow(
        mode=records[0].mode,
        n_agents=records[0].n_agents,
        trials=trials,
        success_rate=count[Outcome.SUCCESS] / trials,
        collision_rate=count[Outcome.COLLISION] / trials,
        timeout_rate=count[Outcome.TIMEOUT] / trials,
        mean_steps=float(np.mean([r.steps for r in records])),
        mean_dagap_s=stage_mean("dagap"),
        mean_cfs_s=stage_mean("cfs"),
        mean_ssa_s=stage_mean("ssa"),
        cfs_feasible_rate=sum(r.cfs_feasible for r in records) / attempts if attempts else None,
    )


def report_timings(records: Sequence[RunRecord]) -> Dict[str, float]:
    """
    各階段（dagap, cfs, ssa）的平均耗時，所有樣本合併計算

    Raises:
        ValueError: records 為空
    """
    if not records:
        raise ValueError("report_timings 至少需要一筆紀錄")
    means = {}
    for stage in STAGES:
        samples = [t for r in records for t in r.timings.get(stage, [])]
        means[stage] = float(np.mean(samples)) if samples else 0.0
    return means


# ==================== JSONL ====================

def write_trials(records: Iterable[TrialRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")
    return path


def read_trials(path: Path) -> List[TrialRecord]:
    with Path(path).open(encoding="utf-8") as f:
        return [TrialRecord.model_validate_json(line) for line in f if line.strip()]


# ==================== 執行 ====================

def _run_trial(job: Tuple[NavigationConfig, PipelineMode, int, int, Optional[Path]]) -> TrialRecord:
    """worker 進程執行的單一 trial（需可 pickle）"""
    config, mode, seed, trial, plot_dir = job
    if plot_dir is not None:
        config = config.with_overrides(record_trace=True)
    record = run_episode(config, mode, seed)

    if plot_dir is not None and record.trace:
        stem = f"{PipelineMode(mode).value}-n{config.scenario.n_agents}-trial{trial:04d}"
        emit_plot(record.trace, plot_dir / f"{stem}.svg", config.scenario.goal_radius, record.collision_tick)
        write_trace_csv(record.trace, plot_dir / f"{stem}.csv")
        if record.outcome is not Outcome.SUCCESS:
            emit_failure_snapshot(record.trace, plot_dir / f"{stem}-failure.svg",
                                  goal_radius=config.scenario.goal_radius, end_tick=record.collision_tick)
    return TrialRecord.from_run(trial, config.scenario.n_agents, record)


def run_trials(spec: ExperimentSpec) -> List[TrialRecord]:
    """依 trial 編號排序回傳；種子只取決於 base_seed 與 trial 編號"""
    plot_dir = Path(spec.out_dir) / "plots" if spec.emit_plots and spec.out_dir is not None else None
    jobs = [(spec.config, spec.mode, trial_seed(spec.base_seed, i), i, plot_dir) for i in range(spec.trials)]

    if spec.workers == 1:
        records = [_run_trial(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            records = list(pool.map(_run_trial, jobs))
    return sorted(records, key=lambda r: r.trial)


def run_experiment(spec: ExperimentSpec) -> Tuple[SummaryTable, List[TrialRecord]]:
    """
    執行實驗並寫出結果

    Args:
        spec: 實驗設定

    Returns:
        (統計表, 依 trial 排序的紀錄)

    Raises:
        OSError: 輸出目錄無法寫入
    """
    print(f"執行 {spec.mode.value}: {spec.n_agents} agents × {spec.trials} trials（{spec.workers} workers）")
    records = run_trials(spec)
    table = SummaryTable(rows=[summarize(records)])

    if spec.out_dir is not None:
        out_dir = Path(spec.out_dir)
        write_trials(records, out_dir / "trials.jsonl")
        table.write(out_dir)
        print(f"結果已寫入: {out_dir}")
    return table, records


def run_ablation_study(
    config: NavigationConfig,
    agent_counts: Sequence[int],
    trials: int,
    base_seed: int = 0,
    workers: int = 1,
    out_dir: Optional[Path] = None,
    modes: Sequence[PipelineMode] = tuple(PipelineMode),
    emit_plots: bool = False,
) -> SummaryTable:
    """
    四種模式 × 各 agent 數量的消融表（每個組合使用相同的種子序列）

    每個組合的 trials.jsonl 寫在 out_dir/<mode>-n<agents>/，合併的 summary 寫在 out_dir。
    """
    rows = []
    for n_agents in agent_counts:
        for mode in modes:
            sub_dir = None if out_dir is None else Path(out_dir) / f"{PipelineMode(mode).value}-n{n_agents}"
            spec = ExperimentSpec(
                config=config.with_overrides(n_agents=n_agents),
                mode=mode,
                trials=trials,
                workers=workers,
                base_seed=base_seed,
                out_dir=sub_dir,
                emit_plots=emit_plots,
            )
            table, _ = run_experiment(spec)
            rows.extend(table.rows)

    table = SummaryTable(rows=rows)
    if out_dir is not None:
        table.write(Path(out_dir))
    return table


# ==================== 可行率研究 ====================

@dataclass(frozen=True)
class FeasibilityReport:
    """CFS 可行率：DAGap 參考軌跡 vs 直線參考軌跡"""
    instances: int
    dagap_attempts: int
    dagap_feasible: int
    straight_attempts: int
    straight_feasible: int
    safety_violations: int

    @property
    def dagap_rate(self) -> float:
        return self.dagap_feasible / self.dagap_attempts if self.dagap_attempts else 0.0

    @property
    def straight_rate(self) -> float:
        return self.straight_feasible / self.straight_attempts if self.straight_attempts else 0.0


def planning_instance(config: NavigationConfig, rng: np.random.Generator) -> PlanningSnapshot:
    """
    隨機規劃情境：機器人放在世界內任意位置，感測範圍內的 agent 以真值加上
    量測等級的共變異數作為估測
    """
    scenario = config.scenario
    world = spawn_scenario(scenario, rng)
    xmin, ymin, xmax, ymax = scenario.bounds
    margin = scenario.sensing_range
    robot = rng.uniform((xmin + margin, ymin + margin), (xmax - margin, ymax - margin))

    sigma = config.estimator.kalman_measurement_std
    covariance = frozen_array(np.diag([sigma**2] * 4))
    estimates = [
        AgentEstimate(a.id, frozen_array(np.concatenate((a.position, a.velocity))), covariance, 0)
        for a in world.agents
        if float(np.hypot(*(a.position - robot))) <= scenario.sensing_range
    ]
    horizon = config.planner.horizon
    return PlanningSnapshot(
        robot_position=frozen_array(robot),
        goal=world.goal,
        predictions=tuple(predict(e, horizon, scenario.dt) for e in estimates),
        horizon=horizon,
        dt=scenario.dt,
        sensing_range=scenario.sensing_range,
    )


def feasibility_study(config: NavigationConfig, instances: int = 1000, seed: int = 0) -> FeasibilityReport:
    """
    在隨機規劃情境上比較 CFS 的可行率

    DAGap 參考軌跡取預選的前兩名；直線參考軌跡直接指向目標。
    同時重新檢查每條可行輸出與所有 agent 的安全距離。
    """
    rng = np.random.default_rng(seed)
    v_max, r_ins = config.v_max, config.gaps.r_ins
    counts = {"dagap": [0, 0], "straight": [0, 0]}
    violations = 0

    for _ in range(instances):
        snapshot = planning_instance(config, rng)
        if not snapshot.predictions:
            continue
        schedules = build_schedules(snapshot.predictions, config.confidence, r_ins, config.d_safe_max)
        try:
            dagap_refs = preselect(synthesize(snapshot, schedules, config.gaps, config.planner, v_max), snapshot.goal)
        except NoCandidateError:
            dagap_refs = []
        references = {
            "dagap": dagap_refs,
            "straight": [straight_line_trajectory(snapshot.robot_position, snapshot.goal,
                                                  snapshot.horizon, v_max * snapshot.dt)],
        }
        for kind, candidates in references.items():
            for reference in candidates:
                scored = optimize_candidate(reference, snapshot.predictions, schedules, r_ins, config.cfs,
                                            snapshot.goal, v_max, snapshot.dt, config.qp)
                counts[kind][0] += 1
                if scored.feasible:
                    counts[kind][1] += 1
                    problem = build_problem(reference, snapshot.predictions, schedules, r_ins,
                                            config.cfs, snapshot.goal, snapshot.dt)
                    violations += safety_violations(scored.trajectory.waypoints, problem)

    report = FeasibilityReport(
        instances=instances,
        dagap_attempts=counts["dagap"][0],
        dagap_feasible=counts["dagap"][1],
        straight_attempts=counts["straight"][0],
        straight_feasible=counts["straight"][1],
        safety_violations=violations,
    )
    logger.info("feasibility: dagap %.3f, straight %.3f, violations %d",
                report.dagap_rate, report.straight_rate, violations)
    return report


def dump_json(data: dict, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding="utf-8")
    return path
