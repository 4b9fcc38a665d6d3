"""
不確定性分析模組
由 Kalman 共變異數估計高信心誤差界，產生每步安全距離 d_safe 與重新規劃步數 k
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import chi2

from ..core.config import ConfidenceParams
from ..core.errors import NumericDomainError
from .estimation import AgentPrediction
from .world_sim import frozen_array

logger = logging.getLogger(__name__)

EIGEN_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SafetySchedule:
    """
    單一 agent 的安全距離排程

    margins[i-1] = r^i，d_safe[i-1] = min(r_ins + r^i, d_safe_max)，i = 1..N。
    replan_step 為第一個觸及上限的 i，沒有觸及時為 N。
    """
    agent_id: Optional[int]
    margins: np.ndarray
    d_safe: np.ndarray
    replan_step: int
    capped: bool

    @property
    def horizon(self) -> int:
        return len(self.d_safe)

    def d_safe_at(self, i: int) -> float:
        """d_safe^i；i = 0 沿用第一步的值"""
        index = min(max(i, 1), self.horizon) - 1
        return float(self.d_safe[index])


def chi2_bound(epsilon: float, dof: int = 2) -> float:
    """
    卡方分布的信心界 k_ε = F⁻¹(1 − ε)

    dof = 2 時使用封閉解 −2·ln(ε)。

    Args:
        epsilon: 容許的超出機率
        dof: 自由度

    Returns:
        k_ε
    """
    if not 0.0 < epsilon < 1.0:
        raise NumericDomainError(f"epsilon 必須介於 (0, 1)，收到 {epsilon}")
    if dof < 1:
        raise NumericDomainError(f"自由度至少為 1，收到 {dof}")
    if dof == 2:
        return float(-2.0 * np.log(epsilon))
    return float(chi2.ppf(1.0 - epsilon, dof))


def margin(covariance, k_epsilon: float) -> float:
    """
    位置誤差的特徵值界 r = Σ_n sqrt(k_ε·λ_n)

    Args:
        covariance: 2×2 對稱半正定位置共變異數
        k_epsilon: 卡方信心界

    Returns:
        誤差半徑上界
    """
    sigma = np.asarray(covariance, dtype=float)
    if sigma.shape != (2, 2):
        raise NumericDomainError(f"位置共變異數必須是 2×2，收到 {sigma.shape}")
    if k_epsilon < 0:
        raise NumericDomainError("k_epsilon 不可為負")
    eigenvalues = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    if eigenvalues.min() < -EIGEN_TOLERANCE:
        raise NumericDomainError(f"共變異數不是半正定：最小特徵值 {eigenvalues.min():.3e}")
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return float(np.sum(np.sqrt(k_epsilon * eigenvalues)))


def build_schedule(
    prediction: AgentPrediction,
    params: ConfidenceParams,
    r_ins: float,
    d_safe_max: Optional[float] = None,
) -> SafetySchedule:
    """
    由單一 agent 的預測建立安全距離排程

    Args:
        prediction: agent 預測（含每步位置共變異數）
        params: ε 與 d_safe_max
        r_ins: 名目膨脹半徑
        d_safe_max: 上限，未提供時依序取 params.d_safe_max 或 2·r_ins

    Returns:
        SafetySchedule
    """
    cap = d_safe_max if d_safe_max is not None else params.d_safe_max
    cap = cap if cap is not None else 2.0 * r_ins
    k_eps = chi2_bound(params.epsilon)

    margins = np.array([margin(cov, k_eps) for cov in prediction.covariances])
    raw = r_ins + margins
    reached = np.flatnonzero(raw >= cap)
    capped = reached.size > 0
    replan_step = int(reached[0]) + 1 if capped else prediction.horizon

    return SafetySchedule(
        agent_id=prediction.agent_id,
        margins=frozen_array(margins),
        d_safe=frozen_array(np.minimum(raw, cap)),
        replan_step=replan_step,
        capped=capped,
    )


def build_schedules(
    predictions: Iterable[AgentPrediction],
    params: ConfidenceParams,
    r_ins: float,
    d_safe_max: Optional[float] = None,
) -> Dict[int, SafetySchedule]:
    """每個 agent 各自的排程（id -> SafetySchedule）"""
    return {p.agent_id: build_schedule(p, params, r_ins, d_safe_max) for p in predictions}


def zero_schedule(horizon: int, r_ins: float, agent_id: Optional[int] = None) -> SafetySchedule:
    """不考慮不確定性時的固定排程：d_safe^i = r_ins，k = N"""
    return SafetySchedule(
        agent_id=agent_id,
        margins=frozen_array(np.zeros(horizon)),
        d_safe=frozen_array(np.full(horizon, r_ins)),
        replan_step=horizon,
        capped=False,
    )


def combine_replan_step(schedules: Mapping[int, SafetySchedule] | Sequence[SafetySchedule], horizon: int) -> int:
    """pipeline 使用的 k：所有 agent 中最早失去信心的步數"""
    values = schedules.values() if isinstance(schedules, Mapping) else schedules
    steps = [s.replan_step for s in values]
    return min(steps) if steps else horizon
