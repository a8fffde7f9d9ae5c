import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from foamcluster.measure import TensionTable  # noqa: E402
from foamcluster.minimize import OptimizerConfig, run_minimize  # noqa: E402

import shapes  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running (minutes); deselect with -m 'not slow'")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def round_sphere():
    """Unit-volume-ish single bubble minimized from a cube down to h = 0.2."""
    target = 4 * np.pi / 3
    m = shapes.unit_cube()
    m = m.with_vertices((m.vertices - 0.5) * target ** (1 / 3))
    cfg = OptimizerConfig(refine_schedule=(0.4, 0.2), max_iters=300, method="cg")
    res = run_minimize(m, TensionTable(), [target], cfg)
    return res, cfg


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
