"""Tests for the global feature extractor."""

import numpy as np
import pytest

from src.config import ConfigurationError
from src.gfe import (
    GLOBAL_CHANNELS, GlobalFeatureExtractor, GridProjector, TokenConditioner, ViTConfig, VisionTransformer,
    condition_tokens, project_to_grid, reduce_aggregate, vit_forward,
)
from src.nn import Linear
from src.tensor import ShapeError, Tensor, backward, gradcheck

from .conftest import TINY_VIT


class TestViTConfig:
    def test_desk_defaults(self):
        cfg = ViTConfig.desk()
        assert (cfg.image_size, cfg.patch_size, cfg.depth, cfg.token_dim) == (64, 8, 6, 128)
        assert cfg.num_tokens == 65

    @pytest.mark.parametrize("overrides", [
        {"image_size": 60},
        {"tap_layers": (0, 2)},
        {"tap_layers": (2, 7)},
        {"tap_layers": (2, 2)},
        {"heads": 3},
    ])
    def test_rejects(self, overrides):
        with pytest.raises(ConfigurationError):
            ViTConfig(**overrides)


class TestBackbone:
    def test_taps_in_layer_order(self, rng):
        backbone = VisionTransformer(TINY_VIT, rng)
        stacks = vit_forward(rng.random((2, 3, 32, 32)), TINY_VIT, backbone)
        assert len(stacks) == 2
        assert all(z.shape == (2, 17, 16) for z in stacks)
        assert not any(z.requires_grad for z in stacks)

    def test_frozen(self, rng):
        backbone = VisionTransformer(TINY_VIT, rng)
        assert backbone.trainable_parameters() == []

    def test_wrong_image_size(self, rng):
        with pytest.raises(ShapeError):
            vit_forward(np.zeros((1, 3, 16, 16)), TINY_VIT, VisionTransformer(TINY_VIT, rng))


class TestReduction:
    def test_drops_class_token_and_sums(self, rng):
        reducers = [Linear(4, 2, rng, bias=False) for _ in range(2)]
        stacks = [rng.normal(size=(1, 5, 4)) for _ in range(2)]
        out = reduce_aggregate(stacks, reducers)
        expected = sum(z[:, 1:, :] @ r.weight.data for z, r in zip(stacks, reducers))
        assert out.shape == (1, 4, 2)
        assert np.allclose(out.data, expected)

    def test_count_mismatch(self, rng):
        with pytest.raises(ShapeError):
            reduce_aggregate([np.zeros((1, 5, 4))], [Linear(4, 2, rng), Linear(4, 2, rng)])

    def test_conditioning_with_zero_context_is_identity(self, rng):
        conditioner = TokenConditioner(6, 3, rng)
        conditioner.context.weight.data[:] = 0.0
        tokens = rng.normal(size=(2, 4, 3))
        assert np.allclose(condition_tokens(tokens, rng.normal(size=6), conditioner).data, tokens)

    def test_conditioning_embedding_length(self, rng):
        with pytest.raises(ShapeError):
            condition_tokens(np.zeros((1, 4, 3)), np.zeros(5), TokenConditioner(6, 3, rng))


class TestProjection:
    def test_grid_doubles(self, rng):
        out = project_to_grid(rng.normal(size=(2, 16, 8)), GridProjector(8, rng))
        assert out.shape == (2, GLOBAL_CHANNELS, 8, 8)

    def test_non_square(self, rng):
        with pytest.raises(ShapeError):
            project_to_grid(np.zeros((1, 15, 8)), GridProjector(8, rng))

    def test_extractor_output(self, rng):
        gfe = GlobalFeatureExtractor(TINY_VIT, 16, rng)
        out = gfe(rng.random((1, 3, 32, 32)), rng.normal(size=16))
        assert gfe.grid_size == 8
        assert out.shape == (1, GLOBAL_CHANNELS, 8, 8)


class TestGlobalPathGradients:
    """Gradients through reduce -> condition -> project, checked against central differences."""

    @pytest.fixture
    def parts(self, rng):
        reducers = [Linear(6, 4, rng, bias=False) for _ in range(2)]
        conditioner = TokenConditioner(5, 4, rng)
        projector = GridProjector(4, rng)
        stacks = [rng.normal(size=(2, 5, 6)) for _ in range(2)]
        weights = rng.normal(size=(2, GLOBAL_CHANNELS, 4, 4))
        return reducers, conditioner, projector, stacks, weights

    def test_wrt_global_embedding(self, rng, parts):
        reducers, conditioner, projector, stacks, weights = parts
        reduced = reduce_aggregate(stacks, reducers).data

        def f(e_c):
            return (project_to_grid(condition_tokens(reduced, e_c, conditioner), projector) * weights).sum()

        assert gradcheck(f, rng.normal(size=(2, 5))) < 1e-6
        assert gradcheck(f, rng.normal(size=5)) < 1e-6

    def test_wrt_token_stack(self, rng, parts):
        reducers, conditioner, projector, stacks, weights = parts
        e_c = rng.normal(size=(2, 5))

        def f(z):
            reduced = reduce_aggregate([z, stacks[1]], reducers)
            return (project_to_grid(condition_tokens(reduced, e_c, conditioner), projector) * weights).sum()

        assert gradcheck(f, stacks[0].copy()) < 1e-6

    def test_class_token_gets_no_gradient(self, rng, parts):
        reducers, conditioner, projector, stacks, weights = parts
        z = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
        reduced = reduce_aggregate([z, stacks[1]], reducers)
        backward((project_to_grid(condition_tokens(reduced, rng.normal(size=5), conditioner), projector)
                  * weights).sum())
        assert np.all(z.grad[:, 0, :] == 0.0)
        assert np.any(z.grad[:, 1:, :] != 0.0)

    def test_global_prompt_changes_features(self, rng):
        gfe = GlobalFeatureExtractor(TINY_VIT, 16, rng)
        images = rng.random((1, 3, 32, 32))
        first = gfe(images, rng.normal(size=16)).data
        second = gfe(images, rng.normal(size=16)).data
        assert first.shape == second.shape
        assert not np.allclose(first, second)
