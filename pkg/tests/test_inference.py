"""Tests for two-pass inference and Grad-CAM."""

from collections import deque

import numpy as np
import pytest

from src.config import ConfigurationError
from src.inference import (
    TwoPassPredictor, binarize, grad_cam, gradcam_from_activations, largest_connected_component,
    two_pass_predict,
)
from src.model import ModelState, XBusNet
from src.prompts import BiRads, LesionMetadata, Margin, PromptBuilder, Shape, SizeBins, centroid_from_mask
from src.validator import ValidationError

META = LesionMetadata("case7", "images/case7.png", "masks/does-not-exist.png", 12.0, Shape.OVAL,
                      Margin.CIRCUMSCRIBED, BiRads.G3)


@pytest.fixture
def state(tiny_config):
    return ModelState(model=XBusNet(tiny_config()), seed=0, size_bins=SizeBins(5.0, 10.0), fold=0)


def blob_map(rows, cols, size=32, inside=0.9, outside=0.1):
    probability = np.full((size, size), outside)
    probability[rows, cols] = inside
    return probability


def stub_passes(mocker, state, first, second):
    maps = iter([first, second])
    return mocker.patch.object(state.model, "predict_proba",
                               side_effect=lambda images, prompts: next(maps)[None, None])


class TestBinarize:
    def test_threshold_is_inclusive(self):
        assert binarize(np.array([0.49, 0.5, 0.51]), 0.5).tolist() == [0, 1, 1]

    @pytest.mark.parametrize("tau", [-0.1, 1.5, float("nan")])
    def test_rejects_bad_threshold(self, tau):
        with pytest.raises(ValidationError):
            binarize(np.zeros(3), tau)


class TestLargestComponent:
    def test_keeps_largest(self):
        mask = np.array([[1, 1, 0, 0],
                         [1, 0, 0, 1],
                         [0, 0, 0, 1]])
        expected = np.array([[1, 1, 0, 0],
                             [1, 0, 0, 0],
                             [0, 0, 0, 0]])
        assert np.array_equal(largest_connected_component(mask), expected)

    def test_diagonal_is_not_connected(self):
        mask = np.array([[1, 0], [0, 1]])
        assert largest_connected_component(mask).sum() == 1

    def test_tie_goes_to_first_in_raster_order(self):
        mask = np.array([[0, 0, 0, 1, 1],
                         [1, 1, 0, 0, 0]])
        expected = np.array([[0, 0, 0, 1, 1],
                             [0, 0, 0, 0, 0]])
        assert np.array_equal(largest_connected_component(mask), expected)

    def test_empty(self):
        assert largest_connected_component(np.zeros((3, 3))).sum() == 0

    def test_full(self):
        assert largest_connected_component(np.ones((3, 3))).sum() == 9


class TestTwoPass:
    def test_proposal_sets_quadrant(self, mocker, state, logger):
        stub = stub_passes(mocker, state, blob_map(slice(2, 7), slice(2, 7)), blob_map(slice(3, 8), slice(3, 8)))
        result = TwoPassPredictor(state, logger=logger).predict(np.zeros((3, 32, 32)), META)
        assert stub.call_count == 2
        assert result.diagnostics["quadrant"] == "upper-inner"
        assert result.diagnostics["centroid"] == [4.0, 4.0]
        assert result.prompts.global_text == "a large lesion in the upper inner quadrant of the breast"
        assert stub.call_args_list[0].args[1][0].global_text == \
            "a large lesion at an unknown location in the breast"
        assert result.mask.sum() == 25
        assert result.proposal.sum() == 25
        logger.log_prediction.assert_called_once()

    def test_lower_outer(self, mocker, state, logger):
        stub_passes(mocker, state, blob_map(slice(20, 30), slice(18, 31)), blob_map(slice(0, 1), slice(0, 1)))
        result = TwoPassPredictor(state, logger=logger).predict(np.zeros((3, 32, 32)), META)
        assert result.diagnostics["quadrant"] == "lower-outer"
        assert not result.diagnostics["fallback"]

    def test_empty_proposal_falls_back(self, mocker, state, logger):
        stub = stub_passes(mocker, state, np.full((32, 32), 0.1), None)
        result = TwoPassPredictor(state, logger=logger).predict(np.zeros((3, 32, 32)), META)
        assert stub.call_count == 1
        assert result.diagnostics["fallback"]
        assert result.diagnostics["second_pass_prompt"] is None
        assert result.mask.sum() == 0

    def test_first_pass_threshold_is_lower(self, mocker, state, logger):
        first = blob_map(slice(2, 7), slice(2, 7), inside=0.35)
        stub = stub_passes(mocker, state, first, first)
        result = TwoPassPredictor(state, logger=logger).predict(np.zeros((3, 32, 32)), META)
        assert stub.call_count == 2
        assert result.proposal.sum() == 25
        assert result.mask.sum() == 0

    def test_mask_path_is_never_read(self, mocker, state, logger):
        read_mask = mocker.patch("src.data.read_mask")
        opener = mocker.patch("PIL.Image.open")
        stub_passes(mocker, state, blob_map(slice(2, 7), slice(2, 7)), blob_map(slice(2, 7), slice(2, 7)))
        two_pass_predict(np.zeros((3, 32, 32)), META, state, logger)
        read_mask.assert_not_called()
        opener.assert_not_called()

    def test_mask_path_does_not_change_result(self, mocker, state, logger):
        first = blob_map(slice(2, 7), slice(20, 25))
        stub_passes(mocker, state, first, first)
        a = TwoPassPredictor(state, logger=logger).predict(np.zeros((3, 32, 32)), META)
        stub_passes(mocker, state, first, first)
        b = TwoPassPredictor(state, logger=logger).predict(np.zeros((3, 32, 32)), META.without_mask())
        assert a.diagnostics == b.diagnostics

    def test_requires_size_bins(self, tiny_config):
        with pytest.raises(ConfigurationError):
            TwoPassPredictor(ModelState(model=XBusNet(tiny_config()), seed=0))

    def test_rejects_bad_threshold(self, state):
        with pytest.raises(ValidationError):
            TwoPassPredictor(state, tau_proposal=2.0)

    def test_real_forward_shapes(self, state, logger, rng):
        result = TwoPassPredictor(state, logger=logger).predict(rng.random((3, 32, 32)), META)
        assert result.probability.shape == (32, 32)
        assert result.mask.dtype == np.uint8
        assert 0.0 <= result.probability.min() and result.probability.max() <= 1.0


class TestGradCam:
    def test_flat_map_is_zero(self):
        cam = gradcam_from_activations(np.ones((2, 3, 3)), np.ones((2, 3, 3)), (6, 6))
        assert np.array_equal(cam, np.zeros((6, 6)))

    def test_weighted_sum_normalized(self):
        activations = np.array([[[0.0, 1.0], [2.0, 3.0]], [[5.0, 5.0], [5.0, 5.0]]])
        gradients = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
        cam = gradcam_from_activations(activations, gradients, (2, 2))
        assert np.allclose(cam, [[0.0, 1 / 3], [2 / 3, 1.0]])

    def test_negative_evidence_is_rectified(self):
        cam = gradcam_from_activations(np.array([[[1.0, 2.0]]]), -np.ones((1, 1, 2)), (1, 2))
        assert np.array_equal(cam, np.zeros((1, 2)))

    def test_heatmap_range_and_clean_gradients(self, state, logger, rng):
        prompts = PromptBuilder(state.model.text_encoder, state.size_bins, 32, logger=logger).build(META, None)
        cam = grad_cam(state, rng.random((3, 32, 32)), prompts)
        assert cam.shape == (32, 32)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert all(p.grad is None for p in state.model.parameters())

    def test_unknown_layer(self, state, logger):
        prompts = PromptBuilder(state.model.text_encoder, state.size_bins, 32, logger=logger).build(META, None)
        with pytest.raises(ValidationError, match="valid layers"):
            grad_cam(state, np.zeros((3, 32, 32)), prompts, target_layer="conv_final")


def flood_fill_components(mask):
    """4-connected components as pixel sets, in raster order of their first pixel."""
    height, width = mask.shape
    seen = np.zeros(mask.shape, dtype=bool)
    components = []
    for r in range(height):
        for c in range(width):
            if not mask[r, c] or seen[r, c]:
                continue
            pixels, queue = set(), deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                pixels.add((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < height and 0 <= nx < width and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            components.append(pixels)
    return components


def random_masks(count=60, side=8, seed=2024):
    rng = np.random.default_rng(seed)
    return [(rng.random((side, side)) < rng.uniform(0.2, 0.7)).astype(np.uint8) for _ in range(count)]


class TestMaskProperties:
    def test_component_matches_flood_fill(self):
        for mask in random_masks():
            kept = largest_connected_component(mask)
            components = flood_fill_components(mask)
            if not components:
                assert kept.sum() == 0
                continue
            assert np.all(kept <= mask)
            kept_pixels = {(int(r), int(c)) for r, c in np.argwhere(kept)}
            assert kept_pixels in components
            assert len(kept_pixels) == max(len(c) for c in components)
            first_largest = next(c for c in components if len(c) == len(kept_pixels))
            assert kept_pixels == first_largest

    def test_binarize_is_monotone_in_threshold(self, rng):
        taus = np.linspace(0.0, 1.0, 11)
        for _ in range(20):
            probability = rng.random((8, 8))
            masks = [binarize(probability, tau) for tau in taus]
            for looser, stricter in zip(masks, masks[1:]):
                assert np.all(stricter <= looser)

    def test_centroid_matches_mean_of_foreground(self):
        for mask in random_masks(count=30, seed=77):
            if not mask.any():
                continue
            cy, cx = np.argwhere(mask).mean(axis=0)
            centroid = centroid_from_mask(mask)
            assert centroid.cx == pytest.approx(cx)
            assert centroid.cy == pytest.approx(cy)
