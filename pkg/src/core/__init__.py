"""
H-DAGap Core Framework
導航堆疊共用的基礎層

核心組件:
- BaseState: Episode 狀態基礎類別
- NavigationConfig: 導航配置（各區段 dataclass + KEY=VALUE 載入）
- WorkflowBuilder: LangGraph 工作流建構器
- NavigationError: 例外階層
"""

from .state import BaseState, create_state
from .config import (
    CfsWeights,
    ConfidenceParams,
    ControllerConfig,
    EstimatorConfig,
    GapConfig,
    NavigationConfig,
    PlannerConfig,
    QpConfig,
    RunConfig,
    SafetyIndexParams,
    ScenarioConfig,
    load_config,
)
from .errors import (
    ConfigError,
    NavigationError,
    NoCandidateError,
    NumericDomainError,
    PlannerFailedError,
    QpError,
    SingularGeometryError,
)
from .workflow import WorkflowBuilder, NodeDefinition, EdgeDefinition, create_outcome_router

__all__ = [
    # State
    "BaseState",
    "create_state",
    # Config
    "CfsWeights",
    "ConfidenceParams",
    "ControllerConfig",
    "EstimatorConfig",
    "GapConfig",
    "NavigationConfig",
    "PlannerConfig",
    "QpConfig",
    "RunConfig",
    "SafetyIndexParams",
    "ScenarioConfig",
    "load_config",
    # Errors
    "ConfigError",
    "NavigationError",
    "NoCandidateError",
    "NumericDomainError",
    "PlannerFailedError",
    "QpError",
    "SingularGeometryError",
    # Workflow
    "WorkflowBuilder",
    "NodeDefinition",
    "EdgeDefinition",
    "create_outcome_router",
]
