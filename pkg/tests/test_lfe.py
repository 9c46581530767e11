"""Tests for the local feature extractor."""

import numpy as np
import pytest

from src.config import ConfigurationError
from src.lfe import LOCAL_CHANNELS, LFEConfig, LocalFeatureExtractor, UpBlock
from src.sfa import SemanticFeatureAdjustment
from src.nn import Conv2d
from src.tensor import ShapeError, bilinear_upsample

from .conftest import TINY_LFE


@pytest.mark.parametrize("overrides", [
    {"widths": (4, 8, 8, 16)},
    {"widths": (4, 8, 8, 16, 0)},
    {"widths": (4, 8, 8, 15, 16), "heads": 2},
])
def test_config_rejects(overrides):
    with pytest.raises(ConfigurationError):
        LFEConfig(**overrides)


def test_encoder_pyramid_shapes(rng):
    lfe = LocalFeatureExtractor(TINY_LFE, rng)
    pyramid = lfe.encode(rng.random((2, 3, 32, 32)))
    shapes = [getattr(pyramid, f"enc{i}").shape for i in range(1, 6)]
    assert shapes == [(2, 4, 16, 16), (2, 8, 8, 8), (2, 8, 4, 4), (2, 16, 2, 2), (2, 16, 1, 1)]


def test_encoder_needs_multiple_of_32(rng):
    with pytest.raises(ShapeError):
        LocalFeatureExtractor(TINY_LFE, rng).encode(np.zeros((1, 3, 48, 48)))


def test_stage_channels(rng):
    assert LocalFeatureExtractor(TINY_LFE, rng).stage_channels == {"enc4": 16, "dec4": 16, "dec3": 8, "dec2": 8}


def test_forward_collects_features(rng):
    lfe = LocalFeatureExtractor(TINY_LFE, rng)
    sfa = SemanticFeatureAdjustment(16, lfe.stage_channels, rng)
    features = {}
    out = lfe(rng.random((1, 3, 32, 32)), rng.normal(size=16), sfa, (8, 8), features)
    assert out.shape == (1, LOCAL_CHANNELS, 8, 8)
    for name in ("enc1", "enc5", "enc4_star", "center", "dec4", "dec3", "dec2", "dec1"):
        assert name in features


def test_identity_modulation_without_residual_matches_plain(rng):
    lfe = LocalFeatureExtractor(TINY_LFE, rng)
    sfa = SemanticFeatureAdjustment(16, lfe.stage_channels, rng, residual_local=False)
    images = rng.random((1, 3, 32, 32))
    with_sfa = lfe(images, rng.normal(size=16), sfa, (8, 8))
    without = lfe(images, np.zeros(16), None, (8, 8))
    assert np.allclose(with_sfa.data, without.data)


def test_up_block_channel_check(rng):
    with pytest.raises(ShapeError):
        UpBlock(8, 4, 4, rng)(np.zeros((1, 6, 2, 2)), np.zeros((1, 4, 4, 4)))


def test_output_is_pointwise_projection_of_dec1_resized_to_grid(rng):
    lfe = LocalFeatureExtractor(TINY_LFE, rng)
    assert isinstance(lfe.head, Conv2d)
    assert lfe.head.weight.shape == (LOCAL_CHANNELS, TINY_LFE.widths[0], 1, 1)
    lfe.head.bias.data[:] = rng.normal(size=LOCAL_CHANNELS)
    features = {}
    out = lfe(rng.random((1, 3, 32, 32)), np.zeros(16), None, (8, 8), features)
    dec1 = features["dec1"].data
    assert dec1.shape[2:] == (16, 16)
    projected = np.einsum("oc,bchw->bohw", lfe.head.weight.data[:, :, 0, 0], dec1)
    projected += lfe.head.bias.data.reshape(1, -1, 1, 1)
    assert np.allclose(out.data, bilinear_upsample(projected, (8, 8)).data)
