import numpy as np
import pytest

from heartvit.model import TINY, ViTConfig, init_model


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(TINY, seed=0)


@pytest.fixture(scope="session")
def small_config():
    # two blocks, 5 tokens: small enough for dense Hessian oracles
    return ViTConfig(image_size=16, patch_size=8, layers=2, heads=2, hidden_dim=16, classes=4)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_model(small_config, seed=3)


@pytest.fixture
def images():
    def make(cfg, count, seed=0):
        return np.random.default_rng(seed).standard_normal((count, cfg.channels, cfg.image_size, cfg.image_size))
    return make


@pytest.fixture(scope="session")
def end_to_end():
    """Train, calibrate and fine-tune the tiny model once per session (several minutes)."""
    from endtoend import run_end_to_end
    return run_end_to_end()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
