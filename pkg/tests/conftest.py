import numpy as np
import pytest

from emic import numcore as nc
from emic.network import StageConfig
from emic.pipeline import Model
from emic.train import TOY_CONFIG


def rel_err(a, b, floor=0.0):
    return abs(a - b) / max(abs(a), abs(b), floor, 1e-300)


@pytest.fixture(scope="session")
def toy_model():
    return Model.init(StageConfig(**TOY_CONFIG), seed=11)


@pytest.fixture
def rng():
    return nc.make_rng(2024)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in RESULTS:
            terminalreporter.write_line(line)
