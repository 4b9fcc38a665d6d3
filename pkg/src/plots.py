"""
繪圖模組
以 SVG 輸出 episode 軌跡圖與失敗情境快照（固定輸入產生逐位元相同的檔案）
"""

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle, Rectangle

from .navigation.world_sim import WorldState

PATH_COLOR = "#c8102e"
AGENT_COLOR = "#1f4e9c"
GOAL_COLOR = "#008000"

# 讓 SVG 內容只取決於輸入
_STABLE_RC = {"svg.hashsalt": "hdagap", "svg.fonttype": "none"}


def _setup_axes(ax, world: WorldState, goal_radius: float) -> None:
    xmin, ymin, xmax, ymax = world.bounds
    ax.add_patch(Rectangle((xmin, ymin), xmax - xmin, ymax - ymin, fill=False, edgecolor="black", linewidth=1.0))
    ax.add_patch(Rectangle(
        (world.goal[0] - goal_radius, world.goal[1] - goal_radius), 2 * goal_radius, 2 * goal_radius,
        facecolor=GOAL_COLOR, alpha=0.6, edgecolor="none",
    ))
    pad = 0.05
    ax.set_xlim(xmin - pad, xmax + pad)
    ax.set_ylim(ymin - pad, ymax + pad)
    ax.set_aspect("equal")
    ax.tick_params(length=0, labelsize=8)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plot(
    trace: Sequence[WorldState],
    path: Union[str, Path],
    goal_radius: float = 0.05,
    collision_tick: Optional[int] = None,
) -> Path:
    """
    輸出整段 episode 的軌跡圖

    內容包含世界邊界、目標方塊、最後一個 tick 的 agent 圓盤與完整機器人路徑；
    有碰撞時在碰撞位置畫上 × 並截斷路徑。

    Args:
        trace: 依 tick 排序的 WorldState（至少一個）
        path: 輸出檔案路徑（.svg）
        goal_radius: 目標區域半徑
        collision_tick: 碰撞 tick（None 表示沒有碰撞）

    Returns:
        輸出檔案路徑
    """
    if not trace:
        raise ValueError("trace 不可為空")
    frames = list(trace)
    if collision_tick is not None:
        frames = [f for f in frames if f.tick <= collision_tick] or frames[:1]
    final = frames[-1]

    with plt.rc_context(_STABLE_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        _setup_axes(ax, final, goal_radius)

        for agent in final.agents:
            ax.add_patch(Circle(agent.position, agent.radius, facecolor=AGENT_COLOR, alpha=0.5, edgecolor="none"))

        path_xy = np.array([f.robot.position for f in frames])
        ax.plot(path_xy[:, 0], path_xy[:, 1], color=PATH_COLOR, linewidth=1.2, solid_capstyle="round")
        if collision_tick is not None:
            ax.plot(*path_xy[-1], marker="x", color="black", markersize=8, markeredgewidth=2)
        return _save(fig, path)


def emit_failure_snapshot(
    trace: Sequence[WorldState],
    path: Union[str, Path],
    window: int = 30,
    goal_radius: float = 0.05,
    end_tick: Optional[int] = None,
) -> Path:
    """
    失敗情境快照：最後 window 個 tick 的機器人與 agent 位置

    越早的位置顏色越深，最後一個位置最淡，方便看出 agent 如何把機器人困住。

    Args:
        trace: 依 tick 排序的 WorldState
        path: 輸出檔案路徑（.svg）
        window: 快照涵蓋的 tick 數
        goal_radius: 目標區域半徑
        end_tick: 快照結束的 tick（預設為最後一個）

    Returns:
        輸出檔案路徑
    """
    if not trace:
        raise ValueError("trace 不可為空")
    frames = [f for f in trace if end_tick is None or f.tick <= end_tick] or list(trace)[:1]
    frames = frames[-window:]
    alphas = np.linspace(0.9, 0.15, len(frames))

    with plt.rc_context(_STABLE_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        _setup_axes(ax, frames[-1], goal_radius)
        for frame, alpha in zip(frames, alphas):
            for agent in frame.agents:
                ax.add_patch(Circle(agent.position, agent.radius, facecolor=AGENT_COLOR,
                                    alpha=float(alpha) * 0.6, edgecolor="none"))
            ax.plot(*frame.robot.position, marker="o", color=PATH_COLOR, alpha=float(alpha), markersize=3)

        # 視窗縮到最後一個機器人位置附近
        center = frames[-1].robot.position
        ax.set_xlim(center[0] - 0.4, center[0] + 0.4)
        ax.set_ylim(center[1] - 0.4, center[1] + 0.4)
        return _save(fig, path)
