import os
from pathlib import Path

import numpy as np
import pytest

from src.core.config import NavigationConfig
from src.navigation.estimation import AgentEstimate
from src.navigation.world_sim import frozen_array


DATA_DIR = Path(__file__).parent / "data"


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="重新產生 tests/data 下由實作記錄的 golden 檔")


@pytest.fixture(autouse=True)
def _clear_env_overrides(monkeypatch):
    for name in list(os.environ):
        if name.startswith("HDAGAP_"):
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def config() -> NavigationConfig:
    return NavigationConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


def _estimate(agent_id, position, velocity=(0.0, 0.0), position_var=0.0, velocity_var=0.0, tick=0):
    state = np.concatenate((np.asarray(position, dtype=float), np.asarray(velocity, dtype=float)))
    covariance = np.diag([position_var, position_var, velocity_var, velocity_var])
    return AgentEstimate(agent_id, frozen_array(state), frozen_array(covariance), tick)


@pytest.fixture
def make_estimate():
    """對角共變異數的估測建構函數"""
    return _estimate


@pytest.fixture
def golden(request):
    """
    取得 tests/data 下的 golden 檔

    golden(name, record) 回傳檔案路徑；檔案不存在或指定 --update-golden 時，
    以 record(path) 寫出目前的結果後跳過該測試，下次執行才開始比對。
    """
    update = request.config.getoption("--update-golden")

    def locate(name, record):
        path = DATA_DIR / name
        if update or not path.exists():
            record(path)
            pytest.skip(f"golden 已寫入 {path}")
        return path

    return locate
