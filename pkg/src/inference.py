"""Mask-free two-pass inference and Grad-CAM."""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .config import ConfigurationError
from .logger import RunLogger, get_logger
from .model import DEFAULT_CAM_LAYER, FEATURE_MAPS, ModelState
from .prompts import LesionMetadata, PromptBuilder, PromptPair, centroid_from_mask, quadrant_of
from .tensor import ShapeError, Tensor, backward, interpolation_matrix
from .validator import InputValidator, ValidationError

TAU_SEG = 0.5
TAU_PROPOSAL = 0.30

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def binarize(probability: np.ndarray, tau: float = TAU_SEG) -> np.ndarray:
    """
    Pixel is foreground iff probability >= tau.

    Raises:
        ValidationError: If tau lies outside [0, 1].
    """
    is_valid, error_msg = InputValidator().validate_threshold(tau, "tau")
    if not is_valid:
        raise ValidationError(error_msg)
    return (np.asarray(probability) >= tau).astype(np.uint8)


def largest_connected_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component; ties go to the one met first in raster order."""
    mask = np.asarray(mask)
    labels, count = ndimage.label(mask > 0, structure=_FOUR_CONNECTED)
    if count == 0:
        return np.zeros_like(mask, dtype=np.uint8)
    flat = labels.ravel()
    sizes = np.bincount(flat)[1:]
    _, first_seen = np.unique(flat, return_index=True)
    first_seen = first_seen[1:] if flat[first_seen[0]] == 0 else first_seen
    candidates = np.flatnonzero(sizes == sizes.max())
    winner = candidates[np.argmin(first_seen[candidates])] + 1
    return (labels == winner).astype(np.uint8)


@dataclass
class TwoPassResult:
    probability: np.ndarray
    mask: np.ndarray
    proposal: np.ndarray
    first_pass_probability: np.ndarray
    prompts: PromptPair
    diagnostics: Dict[str, Any] = field(default_factory=dict)


class TwoPassPredictor:
    """
    Runs the location-free pass, derives the quadrant from the largest proposal
    component, then runs the fully prompted pass. Ground-truth masks are never read.
    """

    def __init__(self, state: ModelState, tau_seg: float = TAU_SEG, tau_proposal: float = TAU_PROPOSAL,
                 logger: Optional[RunLogger] = None):
        if state.size_bins is None:
            raise ConfigurationError("model state carries no size bins; train or load a fold checkpoint")
        validator = InputValidator()
        for name, tau in (("eval.tau_seg", tau_seg), ("eval.tau_proposal", tau_proposal)):
            is_valid, error_msg = validator.validate_threshold(tau, name)
            if not is_valid:
                raise ValidationError(error_msg)
        self.state = state
        self.tau_seg = tau_seg
        self.tau_proposal = tau_proposal
        self.logger = logger or get_logger()
        self.builder = PromptBuilder(state.model.text_encoder, state.size_bins, state.config.image_size,
                                     logger=self.logger)

    def _probability(self, image: np.ndarray, prompts: PromptPair) -> np.ndarray:
        return self.state.model.predict_proba(image[None], [prompts])[0, 0]

    def predict(self, image: np.ndarray, metadata: LesionMetadata) -> TwoPassResult:
        """
        Predict a mask for one image.

        Args:
            image: Float array [3, H, W] at the profile size.
            metadata: Lesion metadata; its mask path is dropped before use.

        Returns:
            TwoPassResult with the final map, both masks and diagnostics.
        """
        metadata = metadata.without_mask()
        height, width = image.shape[1:]
        first_prompts = self.builder.build(metadata, None)
        first = self._probability(image, first_prompts)
        proposal = largest_connected_component(binarize(first, self.tau_proposal))
        component_size = int(proposal.sum())

        diagnostics: Dict[str, Any] = {
            "image_id": metadata.image_id,
            "tau_proposal": self.tau_proposal,
            "tau_seg": self.tau_seg,
            "first_pass_prompt": first_prompts.global_text,
            "local_prompt": first_prompts.local_text,
            "component_size": component_size,
        }
        if component_size == 0:
            final_prompts, probability = first_prompts, first
            diagnostics.update({"fallback": True, "centroid": None, "quadrant": None,
                                "second_pass_prompt": None})
        else:
            centroid = centroid_from_mask(proposal)
            quadrant = quadrant_of(centroid, height, width)
            final_prompts = self.builder.build(metadata, quadrant)
            probability = self._probability(image, final_prompts)
            diagnostics.update({"fallback": False, "centroid": [centroid.cx, centroid.cy],
                                "quadrant": quadrant.value, "second_pass_prompt": final_prompts.global_text})

        result = TwoPassResult(probability=probability, mask=binarize(probability, self.tau_seg),
                               proposal=proposal, first_pass_probability=first, prompts=final_prompts,
                               diagnostics=diagnostics)
        self.logger.log_prediction(metadata.image_id, diagnostics)
        return result


def two_pass_predict(image: np.ndarray, metadata: LesionMetadata, state: ModelState,
                     logger: Optional[RunLogger] = None) -> TwoPassResult:
    """Mask-free prediction for one image; see TwoPassPredictor.predict."""
    return TwoPassPredictor(state, logger=logger).predict(image, metadata)


def gradcam_from_activations(activations: np.ndarray, gradients: np.ndarray,
                             size: Tuple[int, int]) -> np.ndarray:
    """
    Grad-CAM map from one image's activations and gradients, both [C, h, w].

    Channel weights are spatial gradient means; the weighted sum is rectified,
    bilinearly resized to size and min-max normalized (a flat map becomes zeros).
    """
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ShapeError(f"activations {activations.shape} and gradients {gradients.shape} must match as [C, h, w]")
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activations, axes=(0, 0)), 0.0)
    rows = interpolation_matrix(cam.shape[0], size[0])
    cols = interpolation_matrix(cam.shape[1], size[1])
    cam = rows @ cam @ cols.T
    low, high = cam.min(), cam.max()
    if high <= low:
        return np.zeros(size)
    return (cam - low) / (high - low)


def grad_cam(state: ModelState, image: np.ndarray, prompts: PromptPair,
             target_layer: str = DEFAULT_CAM_LAYER) -> np.ndarray:
    """
    Grad-CAM heatmap in [0, 1] at the image size.

    The score is the sum of logits at foreground pixels (logit >= 0), or of all
    logits when no pixel is foreground.

    Raises:
        ValidationError: If target_layer is not a named feature map.
    """
    if target_layer not in FEATURE_MAPS:
        raise ValidationError(f"unknown layer '{target_layer}'; valid layers: {', '.join(FEATURE_MAPS)}")
    model = state.model
    features: Dict[str, Tensor] = {}
    logits = model(image[None], prompts.global_embedding[None], prompts.local_embedding[None], features)
    if target_layer not in features:
        raise ValidationError(f"layer '{target_layer}' is not produced by this model configuration")
    activation = features[target_layer]
    foreground = logits.data >= 0
    selector = foreground if foreground.any() else np.ones_like(foreground)
    score = (logits * selector.astype(np.float64)).sum()
    if not activation.requires_grad:
        return np.zeros(image.shape[1:])
    activation.grad = None
    backward(score)
    gradients = activation.grad if activation.grad is not None else np.zeros_like(activation.data)
    model.zero_grad()
    return gradcam_from_activations(activation.data[0], gradients[0], image.shape[1:])
