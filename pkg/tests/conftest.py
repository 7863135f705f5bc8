import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppmx.encoding import EncodingConfig
from ppmx.network import TrainingConfig
from ppmx.pipeline import PipelineConfig, run_train
from ppmx.surrogate import TreeConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# filled by test_acceptance, echoed after the run
ACCEPTANCE: dict[int, str] = {}

DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture
def data_dir():
    return DATA


def smoke_config(n_cases=40, seed=0, **overrides):
    """Tiny synthetic run: a few seconds end to end."""
    base = dict(
        seed=seed,
        synthetic={"n_cases": n_cases, "seed": 7},
        encoding=EncodingConfig(categorical_attributes=("impact",), seed=seed),
        training=TrainingConfig(max_epochs=25),
        k_range=tuple(range(2, 6)),
        restarts=3,
        tree=TreeConfig(max_depth=3, min_samples_leaf=3),
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def smoke_bundle():
    return run_train(smoke_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
