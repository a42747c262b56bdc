import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY = dict(
    stages=2, train_size=96, val_size=48, test_size=48, epochs=1, pool_size=8, memory_slots=3,
    feature_dim=8, bottleneck=4, layers=2, heads=2, memory_heads=2, tokens=4, input_dim=4,
    e_min=2, e_max=6, batch_size=32, window=8, lr=5e-3,
)


@pytest.fixture
def tiny_config():
    from promptdil.harness.config import ExperimentConfig

    return ExperimentConfig(**TINY)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if passed else 'FAIL'}  {title}: {detail}")
