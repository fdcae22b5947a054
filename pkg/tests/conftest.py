import pytest

from gaze_world.gazedata import GridSpec, synth_world
from gaze_world.model import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    """2x2 grid, d=8, one layer everywhere, float64."""
    settings = dict(
        grid_rows=2,
        grid_cols=2,
        patch_size=2,
        embed_dim=8,
        encoder_layers=1,
        encoder_heads=2,
        predictor_layers=1,
        predictor_heads=2,
        completion_layers=1,
        completion_heads=2,
        dtype="float64",
    )
    settings.update(overrides)
    return ModelConfig(**settings)


def small_model_config(**overrides) -> ModelConfig:
    """4x4 grid, d=16, float64."""
    settings = dict(
        embed_dim=16,
        encoder_layers=1,
        encoder_heads=2,
        predictor_layers=1,
        predictor_heads=2,
        completion_layers=1,
        completion_heads=2,
        dtype="float64",
    )
    settings.update(overrides)
    return ModelConfig(**settings)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_world():
    return synth_world(0, 12, GridSpec(2, 2), patch_size=2, fixations_per_image=3)


@pytest.fixture
def small_world():
    return synth_world(0, 24, GridSpec(4, 4))
