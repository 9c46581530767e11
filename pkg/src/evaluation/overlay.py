"""Error overlays and Grad-CAM heatmap rendering as uint8 RGB arrays."""

import numpy as np
from scipy import ndimage

from ..tensor import ShapeError

FP_COLOR = np.array([0, 0, 255], dtype=np.float64)
FN_COLOR = np.array([255, 0, 0], dtype=np.float64)
TP_OUTLINE_COLOR = np.array([0, 255, 0], dtype=np.float64)
ALPHA = 0.5

# jet-like ramp: dark blue, blue, cyan, yellow, red
_RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_RAMP_COLORS = np.array([
    [0, 0, 128],
    [0, 0, 255],
    [0, 255, 255],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.float64)


def grayscale_rgb(image: np.ndarray) -> np.ndarray:
    """[3, H, W] or [H, W] floats in [0, 1] to float [H, W, 3] gray in [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=0) if image.ndim == 3 else image
    return np.repeat(np.clip(gray, 0.0, 1.0)[..., None] * 255.0, 3, axis=2)


def _blend(base: np.ndarray, where: np.ndarray, color: np.ndarray, alpha: float) -> None:
    base[where] = (1.0 - alpha) * base[where] + alpha * color


def render_overlay(pred: np.ndarray, truth: np.ndarray, image: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """
    False positives blend blue and false negatives blend red over the grayscale
    image; the boundary of the true-positive region is drawn in solid green.

    Raises:
        ShapeError: If pred, truth and image disagree spatially.
    """
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    canvas = grayscale_rgb(image)
    if pred.shape != truth.shape or canvas.shape[:2] != pred.shape:
        raise ShapeError(f"overlay inputs differ: pred {pred.shape}, truth {truth.shape}, image {canvas.shape[:2]}")
    _blend(canvas, pred & ~truth, FP_COLOR, alpha)
    _blend(canvas, ~pred & truth, FN_COLOR, alpha)
    tp = pred & truth
    outline = tp & ~ndimage.binary_erosion(tp, structure=ndimage.generate_binary_structure(2, 1))
    canvas[outline] = TP_OUTLINE_COLOR
    return np.round(canvas).astype(np.uint8)


def heatmap_rgb(cam: np.ndarray) -> np.ndarray:
    cam = np.clip(np.nan_to_num(np.asarray(cam, dtype=np.float64)), 0.0, 1.0)
    channels = [np.interp(cam, _RAMP_STOPS, _RAMP_COLORS[:, c]) for c in range(3)]
    return np.round(np.stack(channels, axis=-1)).astype(np.uint8)


def heatmap_gray(cam: np.ndarray) -> np.ndarray:
    """Heatmap in [0, 1] scaled to single-channel uint8 [0, 255]."""
    cam = np.clip(np.nan_to_num(np.asarray(cam, dtype=np.float64)), 0.0, 1.0)
    return np.round(cam * 255.0).astype(np.uint8)


def render_heatmap_overlay(cam: np.ndarray, image: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    canvas = grayscale_rgb(image)
    if canvas.shape[:2] != np.asarray(cam).shape:
        raise ShapeError(f"heatmap {np.asarray(cam).shape} does not match image {canvas.shape[:2]}")
    blended = (1.0 - alpha) * canvas + alpha * heatmap_rgb(cam).astype(np.float64)
    return np.round(blended).astype(np.uint8)
