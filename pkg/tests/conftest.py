import numpy as np
import pytest

from advdmd.config import TrainConfig
from advdmd.flowmatch import MixtureTarget, VelocityModel
from advdmd.trainer import fit_teacher

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def ring() -> MixtureTarget:
    return MixtureTarget.ring(8, 2.0, 0.15)


@pytest.fixture(scope="session")
def default_config() -> TrainConfig:
    return TrainConfig()


@pytest.fixture(scope="session")
def teacher(default_config) -> VelocityModel:
    """Fully trained ring teacher, shared by every test that needs one (about 20 s)."""
    return fit_teacher(default_config, seed=0)


@pytest.fixture(scope="session")
def small_teacher() -> VelocityModel:
    """Briefly trained narrow teacher for plumbing tests."""
    cfg = TrainConfig(teacher_hidden=[32, 32, 32], teacher_steps=150, teacher_batch=128)
    return fit_teacher(cfg, seed=0)


@pytest.fixture
def tiny_config() -> TrainConfig:
    """Fast settings for integration tests that only exercise plumbing."""
    return TrainConfig(
        total_steps=18, grpo_warmup_steps=1, group_size=4, n_groups=2, fake_batch=16,
        eval_samples=64, teacher_hidden=[32, 32, 32], teacher_steps=20, teacher_batch=64,
    )


@pytest.fixture
def tiny_model() -> VelocityModel:
    return VelocityModel.create(2, 3, (8, 8), "silu", np.random.default_rng(3))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
