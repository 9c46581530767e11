"""Shared fixtures: seeded generators, a tiny network configuration and phantom samples."""

import numpy as np
import pytest

from src.data import SyntheticConfig, generate_dataset
from src.gfe import ViTConfig
from src.lfe import LFEConfig
from src.logger import RunLogger
from src.model import ModelConfig
from src.prompts import TextEncoderConfig

TINY_VIT = ViTConfig(image_size=32, patch_size=8, depth=2, token_dim=16, heads=2, tap_layers=(1, 2), reduce_dim=8)
TINY_LFE = LFEConfig(widths=(4, 8, 8, 16, 16), heads=2)
TINY_TEXT = TextEncoderConfig(dim=16, heads=2, layers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def logger(mocker):
    """Mock logger so tests can assert on warnings without configuring handlers."""
    return mocker.Mock(spec=RunLogger)


@pytest.fixture
def tiny_config():
    """Factory for a 32x32 model small enough for per-test forward/backward passes."""
    def build(**overrides):
        values = dict(profile="desk", seed=0, vit=TINY_VIT, lfe=TINY_LFE, text=TINY_TEXT)
        values.update(overrides)
        return ModelConfig(**values)
    return build


@pytest.fixture
def tiny_synth():
    return SyntheticConfig(count=8, seed=3, image_size=32, axis_range=(3.0, 6.0))


@pytest.fixture
def phantoms(tiny_synth):
    return generate_dataset(tiny_synth)
