import numpy as np
import pytest

from fscil_delta.encoder import EncoderConfig, EncoderModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return EncoderConfig(image_size=8, channels=3, patch_size=4, embed_dim=8, depth=2, heads=2)


def randomize_deltas(model: EncoderModel, rng, scale=0.3):
    for _, t in model.deltas.named():
        t.data = rng.standard_normal(t.shape) * scale
    return model


def randomize_backbone(model: EncoderModel, rng, scale=0.3):
    """Larger-than-default weights so every path contributes visibly to the output."""
    for name, t in model.backbone.named():
        if "gain" in name:
            t.data = 1.0 + 0.2 * rng.standard_normal(t.shape)
        else:
            t.data = rng.standard_normal(t.shape) * scale
    return model
