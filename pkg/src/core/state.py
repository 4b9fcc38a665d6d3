"""
Episode 狀態定義模組
提供可擴展的狀態基礎類別
"""

from typing import Any, Dict, List, Optional, Type, TypedDict


class BaseState(TypedDict, total=False):
    """
    Episode 狀態基礎類別

    LangGraph 工作流在節點間傳遞的狀態。每個節點回傳要更新的欄位，
    沒有 reducer 的欄位一律以新值取代舊值。

    使用範例:
    ```python
    class MyEpisodeState(BaseState):
        trace: list
        custom_field: Any
    ```
    """
    # 模擬時間與世界
    tick: int
    world: Any
    estimates: tuple

    # 規劃結果
    plan: Any
    plan_count: int

    # 結束狀態（None 表示尚未結束）
    outcome: Optional[str]

    # 紀錄
    telemetry: Dict[str, List[float]]
    metadata: Optional[dict]


def create_state(
    extra_fields: dict[str, Any] = None,
    base_class: Type[TypedDict] = None,
    name: str = "DynamicState",
) -> Type[TypedDict]:
    """
    動態建立狀態類別

    Args:
        extra_fields: 額外欄位定義，格式為 {欄位名: 類型}
        base_class: 基礎類別，預設為 BaseState
        name: 新類別名稱（出現在錯誤訊息與 repr）

    Returns:
        新的狀態類別

    使用範例:
    ```python
    EpisodeState = create_state({
        "collisions": list,
        "trace": list,
    })
    ```
    """
    base = base_class or BaseState

    if not extra_fields:
        return base

    annotations = dict(base.__annotations__)
    annotations.update(extra_fields)

    return TypedDict(name, annotations, total=False)
