"""
導航配置模組
提供統一的配置管理（情境、估測、間隙、規劃、控制）

所有欄位名稱在各區段之間唯一，因此可以用扁平的 KEY=VALUE 檔案覆寫。
"""

import os
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_type_hints, get_origin, get_args

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError


ENV_PREFIX = "HDAGAP_"

ROBOT_MODELS = ("double_integrator", "second_order_unicycle")
BOUNDARY_POLICIES = ("reflect", "wrap")
GAP_CONDITION_MODES = ("both", "either")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class ScenarioConfig:
    """
    模擬情境配置

    2×2 世界、agent 數量與速度分布、感測雜訊、步數上限等 benchmark 常數。

    使用範例:
    ```python
    scenario = ScenarioConfig(n_agents=50, rng_seed=7)
    ```
    """
    n_agents: int = 20
    world_size: Tuple[float, float] = (2.0, 2.0)
    agent_radius: float = 0.05
    agent_speed_range: Tuple[float, float] = (5e-3, 2e-2)
    robot_speed_range: Tuple[float, float] = (0.0, 2e-2)
    measurement_noise_std: float = 0.01
    sensing_range: float = 0.2
    step_budget: int = 3500
    rng_seed: int = 0

    # 機器人
    robot_model: str = "double_integrator"
    robot_start: Tuple[float, float] = (0.0, -0.95)
    goal: Tuple[float, float] = (0.0, 0.95)
    goal_radius: float = 0.05
    omega_max: float = 0.3
    dt: float = 1.0

    # agent 運動
    heading_noise_std: float = 0.1
    boundary_policy: str = "reflect"
    spawn_clearance: float = 0.1

    def __post_init__(self):
        _require(self.n_agents >= 0, "n_agents 不可為負")
        _require(all(s > 0 for s in self.world_size), "world_size 必須為正")
        _require(self.agent_radius > 0, "agent_radius 必須為正")
        lo, hi = self.agent_speed_range
        _require(0 <= lo <= hi, "agent_speed_range 需滿足 0 <= lo <= hi")
        lo, hi = self.robot_speed_range
        _require(0 <= lo <= hi and hi > 0, "robot_speed_range 需滿足 0 <= lo <= hi 且 hi > 0")
        _require(self.measurement_noise_std >= 0, "measurement_noise_std 不可為負")
        _require(self.sensing_range > 0, "sensing_range 必須為正")
        _require(self.step_budget >= 1, "step_budget 至少為 1")
        _require(0 <= self.rng_seed < 2**64, "rng_seed 必須是 64-bit 非負整數")
        _require(self.robot_model in ROBOT_MODELS, f"robot_model 必須是 {ROBOT_MODELS} 之一")
        _require(self.boundary_policy in BOUNDARY_POLICIES, f"boundary_policy 必須是 {BOUNDARY_POLICIES} 之一")
        _require(self.goal_radius > 0, "goal_radius 必須為正")
        _require(self.omega_max > 0, "omega_max 必須為正")
        _require(self.dt > 0, "dt 必須為正")
        _require(self.heading_noise_std >= 0, "heading_noise_std 不可為負")
        _require(self.spawn_clearance >= 0, "spawn_clearance 不可為負")

    @property
    def v_max(self) -> float:
        return self.robot_speed_range[1]

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)，世界以原點為中心"""
        half_x, half_y = self.world_size[0] / 2, self.world_size[1] / 2
        return (-half_x, -half_y, half_x, half_y)


@dataclass
class EstimatorConfig:
    """Kalman filter 與追蹤管理配置"""
    process_noise: float = 1e-6          # 加速度變異數（每軸）
    kalman_measurement_std: float = 0.01
    prior_velocity_std: float = 0.02
    track_drop_misses: int = 3
    bearing_noise_std: float = 0.0

    def __post_init__(self):
        _require(self.process_noise >= 0, "process_noise 不可為負")
        _require(self.kalman_measurement_std > 0, "kalman_measurement_std 必須為正")
        _require(self.prior_velocity_std > 0, "prior_velocity_std 必須為正")
        _require(self.track_drop_misses >= 1, "track_drop_misses 至少為 1")
        _require(self.bearing_noise_std >= 0, "bearing_noise_std 不可為負")


@dataclass
class GapConfig:
    """間隙偵測配置"""
    r_ins: float = 0.06
    theta_thre: float = 0.3
    virtual_interval: float = 0.8
    gap_condition_mode: str = "both"
    goal_bias: float = 0.3

    def __post_init__(self):
        _require(self.r_ins > 0, "r_ins 必須為正")
        _require(self.theta_thre >= 0, "theta_thre 不可為負")
        _require(self.virtual_interval > 0, "virtual_interval 必須為正")
        _require(self.gap_condition_mode in GAP_CONDITION_MODES,
                 f"gap_condition_mode 必須是 {GAP_CONDITION_MODES} 之一")
        _require(0 <= self.goal_bias <= 1, "goal_bias 必須介於 0 與 1")


@dataclass
class PlannerConfig:
    """DAGap 軌跡合成配置"""
    horizon: int = 20
    pfm_repulsion_gain: float = 0.02
    pfm_circulation_gain: float = 1.0

    def __post_init__(self):
        _require(self.horizon >= 1, "horizon 至少為 1")
        _require(self.pfm_repulsion_gain >= 0, "pfm_repulsion_gain 不可為負")
        _require(self.pfm_circulation_gain >= 0, "pfm_circulation_gain 不可為負")


@dataclass
class ConfidenceParams:
    """
    不確定性分析配置

    d_safe_max 為 None 時取 2·r_ins。
    """
    epsilon: float = 0.01
    d_safe_max: Optional[float] = None

    def __post_init__(self):
        _require(0 < self.epsilon < 1, "epsilon 必須介於 (0, 1)")
        _require(self.d_safe_max is None or self.d_safe_max > 0, "d_safe_max 必須為正")


@dataclass
class CfsWeights:
    """CFS 目標函數權重"""
    w_r: float = 1.0
    w_v: float = 0.5
    w_a: float = 0.5
    infeasible_penalty: float = 1e3
    cfs_converge: bool = False

    def __post_init__(self):
        _require(min(self.w_r, self.w_v, self.w_a) >= 0, "CFS 權重不可為負")
        _require(self.w_r > 0, "w_r 必須為正（確保 Hessian 正定）")


@dataclass
class ControllerConfig:
    """參考控制器（PD）與控制邊界"""
    kp: float = 0.3
    kd: float = 0.8
    u_max: float = 2e-3
    alpha_max: float = 0.05
    k_heading: float = 0.4
    k_omega: float = 0.9

    def __post_init__(self):
        _require(self.kp >= 0 and self.kd >= 0, "PD 增益不可為負")
        _require(self.u_max > 0, "u_max 必須為正")
        _require(self.alpha_max > 0, "alpha_max 必須為正")


@dataclass
class SafetyIndexParams:
    """
    SSA safety index 參數

    d_min 為 None 時取 agent_radius + 0.02。
    """
    d_min: Optional[float] = None
    k_grad: float = 1.0
    eta: float = 0.5

    def __post_init__(self):
        _require(self.d_min is None or self.d_min > 0, "d_min 必須為正")
        _require(self.k_grad > 0, "k_grad 必須為正")
        _require(self.eta > 0, "eta 必須為正")


@dataclass
class QpConfig:
    """QP 求解器容差"""
    qp_tol: float = 1e-8
    qp_max_iter: int = 200

    def __post_init__(self):
        _require(self.qp_tol > 0, "qp_tol 必須為正")
        _require(self.qp_max_iter >= 1, "qp_max_iter 至少為 1")


@dataclass
class RunConfig:
    """單次 episode 的執行協定"""
    stop_on_collision: bool = True
    record_trace: bool = False
    threaded: bool = False
    tick_period_s: float = 0.0
    planner_timeout_s: float = 30.0      # 執行緒模式等待第一個計畫的上限

    def __post_init__(self):
        _require(self.tick_period_s >= 0, "tick_period_s 不可為負")
        _require(self.planner_timeout_s > 0, "planner_timeout_s 必須為正")


SECTIONS: Dict[str, type] = {
    "scenario": ScenarioConfig,
    "estimator": EstimatorConfig,
    "gaps": GapConfig,
    "planner": PlannerConfig,
    "confidence": ConfidenceParams,
    "cfs": CfsWeights,
    "controller": ControllerConfig,
    "safety_index": SafetyIndexParams,
    "qp": QpConfig,
    "run": RunConfig,
}


def _build_key_index() -> Dict[str, Tuple[str, str]]:
    index: Dict[str, Tuple[str, str]] = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in index:
                raise RuntimeError(f"配置欄位名稱重複: {f.name}")
            index[f.name] = (section, f.name)
    return index


# 扁平 key -> (區段, 欄位)
KEY_INDEX = _build_key_index()


@dataclass
class NavigationConfig:
    """
    導航系統總配置

    聚合所有區段，讓 pipeline 與 harness 只需要傳遞一個物件。

    使用範例:
    ```python
    config = NavigationConfig()
    config = config.with_overrides(n_agents=50, epsilon=0.05)
    ```
    """
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    gaps: GapConfig = field(default_factory=GapConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    confidence: ConfidenceParams = field(default_factory=ConfidenceParams)
    cfs: CfsWeights = field(default_factory=CfsWeights)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    safety_index: SafetyIndexParams = field(default_factory=SafetyIndexParams)
    qp: QpConfig = field(default_factory=QpConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # ========================================
    # 衍生值
    # ========================================

    @property
    def v_max(self) -> float:
        return self.scenario.v_max

    @property
    def d_safe_max(self) -> float:
        if self.confidence.d_safe_max is not None:
            return self.confidence.d_safe_max
        return 2.0 * self.gaps.r_ins

    @property
    def d_min(self) -> float:
        if self.safety_index.d_min is not None:
            return self.safety_index.d_min
        return self.scenario.agent_radius + 0.02

    # ========================================
    # 複製與序列化
    # ========================================

    def with_overrides(self, **overrides: Any) -> "NavigationConfig":
        """
        建立套用覆寫值的配置副本

        Args:
            **overrides: 扁平欄位名稱 -> 新值

        Returns:
            新的 NavigationConfig 實例
        """
        grouped: Dict[str, Dict[str, Any]] = {}
        for key, value in overrides.items():
            if key not in KEY_INDEX:
                raise ConfigError(f"未知的配置欄位: {key}")
            section, name = KEY_INDEX[key]
            grouped.setdefault(section, {})[name] = value

        updated = {
            section: dataclasses.replace(getattr(self, section), **values)
            for section, values in grouped.items()
        }
        return dataclasses.replace(self, **updated)

    def to_dict(self) -> dict:
        """轉換為巢狀字典"""
        return {section: dataclasses.asdict(getattr(self, section)) for section in SECTIONS}

    def to_flat_dict(self) -> dict:
        """轉換為扁平字典（與配置檔格式一致）"""
        flat = {}
        for section in SECTIONS:
            flat.update(dataclasses.asdict(getattr(self, section)))
        return flat

    @classmethod
    def from_flat_dict(cls, values: Dict[str, Any]) -> "NavigationConfig":
        return cls().with_overrides(**values)


# ========================================
# KEY=VALUE 解析
# ========================================

def _field_type(key: str) -> Any:
    section, name = KEY_INDEX[key]
    return get_type_hints(SECTIONS[section])[name]


def coerce_value(key: str, raw: str) -> Any:
    """
    將字串值轉換為欄位宣告的型別

    Args:
        key: 扁平欄位名稱
        raw: 原始字串

    Returns:
        轉換後的值
    """
    declared = _field_type(key)
    text = raw.strip()

    # Optional[X] -> X，空字串或 none 代表 None
    if get_origin(declared) is Union:
        if text.lower() in ("", "none", "null"):
            return None
        declared = next(a for a in get_args(declared) if a is not type(None))

    try:
        if get_origin(declared) is tuple:
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            item_type = get_args(declared)[0]
            return tuple(item_type(p.strip()) for p in parts)
        if declared is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if declared is int:
            return int(text, 0) if text.lower().startswith("0x") else int(text)
        return declared(text)
    except ValueError as e:
        raise ConfigError(f"配置值無法解析 {key}={raw!r}: {e}") from e


def parse_key_values(values: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """將 KEY=VALUE 字典轉換為型別正確的覆寫值"""
    parsed = {}
    for raw_key, raw_value in values.items():
        key = raw_key.strip().lower()
        if key not in KEY_INDEX:
            raise ConfigError(f"未知的配置欄位: {raw_key}")
        if raw_value is None:
            raise ConfigError(f"配置欄位缺少值: {raw_key}")
        parsed[key] = coerce_value(key, raw_value)
    return parsed


def env_overrides(environ: Optional[Dict[str, str]] = None, prefix: str = ENV_PREFIX) -> Dict[str, Any]:
    """收集 HDAGAP_ 前綴的環境變數覆寫（未知 key 會被忽略，例如 HDAGAP_LOG_LEVEL）"""
    environ = os.environ if environ is None else environ
    collected = {}
    for name, value in environ.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):].lower()
        if key in KEY_INDEX:
            collected[key] = value
    return parse_key_values(collected)


def load_config(
    path: Optional[Union[str, Path]] = None,
    use_env: bool = True,
    **overrides: Any,
) -> NavigationConfig:
    """
    載入配置

    優先順序：預設值 < 配置檔 < 環境變數 < 參數覆寫

    Args:
        path: KEY=VALUE 配置檔路徑
        use_env: 是否讀取 .env 與 HDAGAP_ 環境變數
        **overrides: 最後套用的覆寫值

    Returns:
        NavigationConfig 實例
    """
    config = NavigationConfig()

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"找不到配置檔: {path}")
        config = config.with_overrides(**parse_key_values(dotenv_values(path)))

    if use_env:
        load_dotenv()
        config = config.with_overrides(**env_overrides())

    if overrides:
        config = config.with_overrides(**overrides)
    return config
