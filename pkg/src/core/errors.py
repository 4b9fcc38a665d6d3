"""
錯誤類別模組
導航堆疊共用的例外階層
"""


class NavigationError(Exception):
    """所有導航相關錯誤的基礎類別"""


class ConfigError(NavigationError, ValueError):
    """配置檔或參數驗證失敗"""


class NumericDomainError(NavigationError, ValueError):
    """數值定義域錯誤（負特徵值、arcsin 超出範圍等）"""


class QpError(NavigationError):
    """QP 問題本身不合法（維度不符、Hessian 非半正定）"""


class NoCandidateError(NavigationError):
    """沒有可供選擇的候選軌跡，需要以 sentinel 軌跡重新規劃"""


class SingularGeometryError(NavigationError):
    """機器人與 agent 中心重合，幾何量無定義"""


class PlannerFailedError(NavigationError):
    """執行緒模式中規劃執行緒失敗或逾時；原始例外放在 __cause__"""
