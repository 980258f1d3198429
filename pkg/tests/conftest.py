"""Shared fixtures. Trained control-task models are built once per session."""

from __future__ import annotations

import numpy as np
import pytest

from uqdecomp import harness as H
from uqdecomp import mlp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained():
    """Full-size calibration (K=5, 200 epochs) shared by acceptance checks."""
    models, cal = H.calibrate(seed=0)
    return models, cal


@pytest.fixture(scope="session")
def small_models():
    """Cheap calibration for smoke tests of the controller and harness plumbing."""
    models, cal = H.calibrate(seed=3, cal_episodes=30, k=2, train_cfg=mlp.TrainConfig(epochs=10),
                              t_cal=150)
    return models, cal


@pytest.fixture(scope="session")
def tracking_study():
    """Default capacity-selection study (estimators, trained tables, eval reports)."""
    from uqdecomp import capacity as K
    return K.run_tracking_experiment(K.TrackingConfig(), seed=0)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per criterion; they are printed in the terminal summary."""
    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
