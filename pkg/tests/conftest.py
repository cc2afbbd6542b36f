"""测试公共设置：把项目根目录加入 sys.path，并提供共享夹具"""
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from physics_core import PhysicalParams  # noqa: E402
from utils import RandomStream  # noqa: E402


@pytest.fixture
def params() -> PhysicalParams:
    return PhysicalParams()


@pytest.fixture
def rng() -> RandomStream:
    return RandomStream.from_seed(2024, 0)


def pytest_addoption(parser) -> None:
    parser.addoption('--runslow', action='store_true', default=False, help='运行完整系综的慢速测试')


def pytest_configure(config) -> None:
    config.addinivalue_line('markers', 'slow: 完整系综的慢速测试，需要 --runslow')


def pytest_collection_modifyitems(config, items) -> None:
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
