"""
Episode 工作流模組
把 perceive → plan → execute 迴圈包成 LangGraph StateGraph
"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Type, TypedDict

from langgraph.graph import END, START, StateGraph

from .state import BaseState

# recursion_limit 在迴圈步數之外多留給入口節點的步數
RECURSION_HEADROOM = 10


@dataclass
class NodeDefinition:
    """已註冊的節點（名稱 + 處理函數，處理函數回傳要更新的狀態欄位）"""
    name: str
    handler: Callable[[Any], dict] = None


@dataclass
class EdgeDefinition:
    """
    已註冊的邊

    target 與 condition 二擇一：
    - 固定邊：EdgeDefinition("perceive", target="plan")
    - 條件邊：EdgeDefinition("execute", condition=router, mapping={"continue": "plan", END: END})
    """
    source: str
    target: str = None
    condition: Callable[[Any], str] = None
    mapping: Dict[str, str] = None

    @property
    def targets(self) -> List[str]:
        if self.mapping is not None:
            return list(dict.fromkeys(self.mapping.values()))
        return [self.target]


class WorkflowBuilder:
    """
    工作流建構器

    記錄節點與邊的定義，同時轉交給 StateGraph；compile() 的結果會被快取，
    因此同一個 builder 重複執行 episode 不會重新編譯。

    使用範例:
    ```python
    builder = WorkflowBuilder(EpisodeState)
    builder.add_node("perceive", runner.perceive)
    builder.add_node("plan", runner.plan)
    builder.add_node("execute", runner.execute)
    builder.set_entry_point("perceive")
    builder.add_edge("perceive", "plan")
    builder.add_edge("plan", "execute")
    builder.add_conditional_edge("execute", create_outcome_router("continue"),
                                 {"continue": "plan", END: END})

    final_state = builder.invoke({"tick": 0}, max_cycles=3500)
    ```
    """

    def __init__(self, state_class: Type[TypedDict] = None):
        self.state_class = state_class or BaseState
        self.workflow = StateGraph(self.state_class)
        self.nodes: Dict[str, NodeDefinition] = {}
        self.edges: List[EdgeDefinition] = []
        self.entry_point: Optional[str] = None
        self._compiled = None

    def _check_mutable(self) -> None:
        if self._compiled is not None:
            raise RuntimeError("工作流已編譯，不能再新增節點或邊")

    def add_node(self, name: str, handler: Callable[[Any], dict]) -> "WorkflowBuilder":
        self._check_mutable()
        if name in self.nodes:
            raise ValueError(f"節點名稱重複: {name}")
        self.nodes[name] = NodeDefinition(name=name, handler=handler)
        self.workflow.add_node(name, handler)
        return self

    def set_entry_point(self, node_name: str) -> "WorkflowBuilder":
        self._check_mutable()
        self.entry_point = node_name
        self.workflow.set_entry_point(node_name)
        return self

    def add_edge(self, source: str, target: str) -> "WorkflowBuilder":
        self._check_mutable()
        self.edges.append(EdgeDefinition(source=source, target=target))
        self.workflow.add_edge(source, target)
        return self

    def add_conditional_edge(
        self,
        source: str,
        condition: Callable[[Any], str],
        mapping: Dict[str, str],
    ) -> "WorkflowBuilder":
        """
        添加條件邊

        Args:
            source: 來源節點
            condition: 依狀態回傳 mapping 的 key
            mapping: key -> 目標節點（可以是 END）

        Returns:
            self
        """
        self._check_mutable()
        self.edges.append(EdgeDefinition(source=source, condition=condition, mapping=mapping))
        self.workflow.add_conditional_edges(source, condition, mapping)
        return self

    def compile(self):
        """編譯（只做一次）"""
        if self._compiled is None:
            self._compiled = self.workflow.compile()
        return self._compiled

    def invoke(self, initial_state: dict, max_cycles: Optional[int] = None) -> dict:
        """
        執行到結束節點

        Args:
            initial_state: 初始狀態
            max_cycles: 迴圈最多繞幾圈（例如步數上限）；每圈最多經過
                len(nodes) 個節點，據此換算 LangGraph 的 recursion_limit

        Returns:
            最終狀態
        """
        config = None
        if max_cycles is not None:
            limit = max(1, len(self.nodes)) * max_cycles + RECURSION_HEADROOM
            config = {"recursion_limit": limit}
        return self.compile().invoke(initial_state, config=config)

    def describe(self) -> List[str]:
        """每條邊一行的文字描述，例如 `execute -> plan | __end__`"""
        lines = []
        if self.entry_point is not None:
            lines.append(f"{START} -> {self.entry_point}")
        for edge in self.edges:
            lines.append(f"{edge.source} -> {' | '.join(edge.targets)}")
        return lines

    def draw_ascii(self) -> str:
        """以 ASCII 繪製工作流（LangGraph 透過 grandalf 排版）"""
        return self.compile().get_graph().draw_ascii()


def create_outcome_router(
    continue_node: str,
    end_node: str = END,
    outcome_key: str = "outcome",
) -> Callable[[Any], str]:
    """
    state[outcome_key] 有值時結束，否則回到 continue_node

    使用範例:
    ```python
    route = create_outcome_router("plan")
    route({"outcome": None})       # "plan"
    route({"outcome": "success"})  # END
    ```
    """
    def route_by_outcome(state: Any) -> str:
        if state.get(outcome_key) is not None:
            return end_node
        return continue_node

    return route_by_outcome
