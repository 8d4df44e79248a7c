import numpy as np
import pytest

from vicregl.config import TrainConfig
from vicregl.data import ShapesConfig, render_shapes
from vicregl.model import EncoderConfig, HeadConfig

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**kw) -> TrainConfig:
    """A few-second training config for plumbing tests."""
    cfg = TrainConfig(
        encoder=EncoderConfig(stem_channels=8, stage_channels=[16, 16], input_size=32),
        heads=HeadConfig(projector_dims=[16, 16, 16], expander_dims=[16, 32, 32]),
        batch_size=8,
        epochs=2,
    )
    cfg.optim.warmup_epochs = 1
    cfg.multicrop.large_size = 32
    cfg.multicrop.small_size = 16
    cfg.multicrop.n_small = 2
    cfg.loss.gamma_large = 8
    cfg.loss.gamma_small = 2
    cfg.data.canvas_size = 32
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def shapes32():
    return render_shapes(ShapesConfig(canvas_size=32, size_range=(3.0, 7.0), seed=3), 32)


@pytest.fixture(scope="session")
def shapes64():
    return render_shapes(ShapesConfig(seed=5), 40)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
