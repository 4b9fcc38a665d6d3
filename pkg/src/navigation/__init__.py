"""
H-DAGap 導航模組
人群中的間隙式局部規劃：DAGap 合成 + 不確定性安全距離 + CFS 最佳化 + SSA 安全控制

模組組成:
- world_sim: 模擬世界與機器人動力學
- estimation: 量測與 Kalman 追蹤
- gap_detect / dagap: 間隙偵測與多軌跡合成
- uncertainty: 信心界與安全距離排程
- qp_core / cfs_opt / ssa_ctrl: QP 求解、軌跡最佳化、安全控制
- pipeline: 規劃-追蹤迴圈
"""

from .world_sim import (
    ROBOT_ENTITY_ID,
    AgentTruth,
    BoundaryPolicy,
    CollisionReport,
    RobotModel,
    RobotState,
    WorldSimulator,
    WorldState,
    check_collision,
    goal_reached,
    read_trace_csv,
    spawn_scenario,
    step_agents,
    step_robot,
    write_trace_csv,
)
from .estimation import (
    AgentEstimate,
    AgentPrediction,
    AgentTracker,
    Scan,
    kalman_predict,
    kalman_update,
    nees,
    predict,
    sense,
)
from .gap_detect import Gap, GapStatus, InflatedAgent, detect_gaps, gap_goal, inflate, tangent_points
from .uncertainty import SafetySchedule, build_schedule, build_schedules, chi2_bound, margin
from .qp_core import QpProblem, QpSolution, QpStatus, kkt_residuals, solve
from .dagap import (
    PlanningSnapshot,
    Trajectory,
    TrajectoryStatus,
    pfm_step,
    straight_line_trajectory,
    synthesize,
    write_trajectories_csv,
)
from .cfs_opt import CfsProblem, CfsResult, ScoredTrajectory, cfs_iterate, optimize_candidate, preselect, score
from .ssa_ctrl import SafeController, SsaConstraint, SsaTelemetry, reference_control, safe_control, safety_index
from .pipeline import (
    AblationResult,
    EpisodeRunner,
    Outcome,
    PipelineMode,
    Planner,
    PlanResult,
    RunRecord,
    SnapshotCell,
    make_snapshot,
    run_ablation,
    run_episode,
    trial_seed,
)

__all__ = [
    # World
    "ROBOT_ENTITY_ID",
    "AgentTruth",
    "BoundaryPolicy",
    "CollisionReport",
    "RobotModel",
    "RobotState",
    "WorldSimulator",
    "WorldState",
    "check_collision",
    "goal_reached",
    "read_trace_csv",
    "spawn_scenario",
    "step_agents",
    "step_robot",
    "write_trace_csv",
    # Estimation
    "AgentEstimate",
    "AgentPrediction",
    "AgentTracker",
    "Scan",
    "kalman_predict",
    "kalman_update",
    "nees",
    "predict",
    "sense",
    # Gaps
    "Gap",
    "GapStatus",
    "InflatedAgent",
    "detect_gaps",
    "gap_goal",
    "inflate",
    "tangent_points",
    # Uncertainty
    "SafetySchedule",
    "build_schedule",
    "build_schedules",
    "chi2_bound",
    "margin",
    # QP
    "QpProblem",
    "QpSolution",
    "QpStatus",
    "kkt_residuals",
    "solve",
    # Planning
    "PlanningSnapshot",
    "Trajectory",
    "TrajectoryStatus",
    "pfm_step",
    "straight_line_trajectory",
    "synthesize",
    "write_trajectories_csv",
    "CfsProblem",
    "CfsResult",
    "ScoredTrajectory",
    "cfs_iterate",
    "optimize_candidate",
    "preselect",
    "score",
    # Control
    "SafeController",
    "SsaConstraint",
    "SsaTelemetry",
    "reference_control",
    "safe_control",
    "safety_index",
    # Pipeline
    "AblationResult",
    "EpisodeRunner",
    "Outcome",
    "PipelineMode",
    "Planner",
    "PlanResult",
    "RunRecord",
    "SnapshotCell",
    "make_snapshot",
    "run_ablation",
    "run_episode",
    "trial_seed",
]
