"""Synthetic phantoms, dataset loading, resizing, folds and PNG I/O."""

import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .config import ConfigurationError
from .logger import RunLogger, get_logger
from .prompts import BiRads, LesionMetadata, Margin, Shape, parse_metadata_csv, write_metadata_csv
from .tensor import interpolation_matrix
from .validator import InputValidator


class DatasetError(Exception):
    """Raised when one or more dataset items cannot be loaded; carries every item error."""

    def __init__(self, errors: Dict[str, str]):
        self.errors = dict(errors)
        details = "; ".join(f"{item}: {message}" for item, message in self.errors.items())
        super().__init__(f"{len(self.errors)} invalid dataset item(s): {details}")


class MaskFormatError(Exception):
    """Raised for masks that are not readable 8-bit single-channel PNGs."""
    pass


@dataclass(frozen=True)
class Sample:
    """
    One image with its mask and metadata.

    Attributes:
        image: Float array [3, H, W] in [0, 1].
        mask: uint8 array [H, W] with values {0, 1}.
        metadata: Lesion metadata row.
        center: Generator lesion center (cx, cy) for phantoms, else None.
    """
    image: np.ndarray
    mask: np.ndarray
    metadata: LesionMetadata
    center: Optional[Tuple[float, float]] = None

    @property
    def image_id(self) -> str:
        return self.metadata.image_id


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: Tuple[str, ...]
    val_ids: Tuple[str, ...]


@dataclass(frozen=True)
class SyntheticConfig:
    """
    Phantom generator settings.

    Attributes:
        count: Number of samples.
        seed: Root seed; sample i draws from default_rng([seed, i]).
        image_size: Square image side in pixels.
        axis_range: Range of ellipse semi-axes in pixels.
        amplitude_range: Boundary perturbation amplitude for irregular lesions.
        contrast_range: Lesion intensity as a fraction of the local background.
        speckle_strength: Standard deviation of the unit-mean multiplicative speckle.
        irregular_fraction: Probability that a lesion gets a perturbed boundary.
    """
    count: int = 40
    seed: int = 0
    image_size: int = 64
    axis_range: Tuple[float, float] = (8.0, 20.0)
    amplitude_range: Tuple[float, float] = (0.10, 0.25)
    contrast_range: Tuple[float, float] = (0.25, 0.55)
    speckle_strength: float = 0.25
    irregular_fraction: float = 0.5

    def __post_init__(self):
        if self.count < 0:
            raise ConfigurationError("synth.count cannot be negative")
        for name in ("axis_range", "amplitude_range", "contrast_range"):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise ConfigurationError(f"{name} must be a positive, ordered range, got {(low, high)}")
        if self.speckle_strength <= 0:
            raise ConfigurationError("speckle_strength must be positive")
        reach = 2 * self.axis_range[1] * (1 + self.amplitude_range[1]) + 4
        if reach > self.image_size:
            raise ConfigurationError(
                f"lesions up to {reach:.1f}px across do not fit in a {self.image_size}px image")


IRREGULAR_AMPLITUDE = 0.08
ROUND_AXIS_RATIO = 0.9

# inclusive frequency bands for irregular margins
_MARGIN_BANDS = (
    (3, 4, Margin.INDISTINCT),
    (5, 6, Margin.ANGULAR),
    (7, 9, Margin.MICROLOBULATED),
    (10, 14, Margin.SPICULATED),
)


def classify_lesion(amplitude: float, frequency: int, axis_ratio: float) -> Tuple[Shape, Margin, BiRads]:
    """Map generator parameters to (shape, margin, BI-RADS)."""
    if amplitude > IRREGULAR_AMPLITUDE:
        margin = next((m for low, high, m in _MARGIN_BANDS if low <= frequency <= high), Margin.SPICULATED)
        return Shape.IRREGULAR, margin, BiRads.G5 if margin == Margin.SPICULATED else BiRads.G4
    if axis_ratio >= ROUND_AXIS_RATIO:
        return Shape.ROUND, Margin.CIRCUMSCRIBED, BiRads.G2
    return Shape.OVAL, Margin.CIRCUMSCRIBED, BiRads.G3


def lesion_mask(size: int, center: Tuple[float, float], axes: Tuple[float, float], rotation: float,
                amplitude: float, frequency: int, phase: float) -> np.ndarray:
    """Ellipse whose normalized radius is modulated by 1 + amplitude * sin(frequency * theta + phase)."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = cols - center[0], rows - center[1]
    u = (dx * math.cos(rotation) + dy * math.sin(rotation)) / axes[0]
    v = (-dx * math.sin(rotation) + dy * math.cos(rotation)) / axes[1]
    radius = np.hypot(u, v)
    boundary = 1.0 + amplitude * np.sin(frequency * np.arctan2(v, u) + phase)
    return (radius <= boundary).astype(np.uint8)


def max_bbox_side(mask: np.ndarray) -> int:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return 0
    return int(max(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1))


def generate_phantom(cfg: SyntheticConfig, index: int) -> Sample:
    """
    Build one phantom: textured speckled background with one darker lesion.

    Every random draw comes from default_rng([cfg.seed, index]).
    """
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    a = rng.uniform(*cfg.axis_range)
    b = rng.uniform(*cfg.axis_range)
    irregular = rng.random() < cfg.irregular_fraction
    amplitude = rng.uniform(*cfg.amplitude_range) if irregular else 0.0
    frequency = int(rng.integers(3, 15))
    rotation = rng.uniform(0.0, math.pi)
    phase = rng.uniform(0.0, 2 * math.pi)
    reach = max(a, b) * (1.0 + amplitude) + 1.0
    cx = rng.uniform(reach, size - 1 - reach)
    cy = rng.uniform(reach, size - 1 - reach)

    mask = lesion_mask(size, (cx, cy), (a, b), rotation, amplitude, frequency, phase)
    shape, margin, birads = classify_lesion(amplitude, frequency, min(a, b) / max(a, b))

    texture = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=3.0)
    texture /= max(float(np.abs(texture).max()), 1e-12)
    background = 0.55 + 0.1 * texture
    contrast = rng.uniform(*cfg.contrast_range)
    soft = gaussian_filter(mask.astype(np.float64), sigma=0.8)
    clean = background * (1.0 - (1.0 - contrast) * soft)
    k = 1.0 / cfg.speckle_strength ** 2
    speckle = rng.gamma(k, 1.0 / k, (size, size))
    gray = np.clip(clean * speckle, 0.0, 1.0)

    image_id = f"phantom_{index:04d}"
    metadata = LesionMetadata(
        image_id=image_id,
        image_path=f"images/{image_id}.png",
        mask_path=f"masks/{image_id}.png",
        size_value=float(max_bbox_side(mask)),
        shape=shape,
        margin=margin,
        birads=birads,
    )
    return Sample(np.repeat(gray[None], 3, axis=0), mask, metadata, center=(cx, cy))


def generate_dataset(cfg: SyntheticConfig) -> List[Sample]:
    """cfg.count phantoms, sample i drawn from default_rng([cfg.seed, i])."""
    return [generate_phantom(cfg, i) for i in range(cfg.count)]


# -- PNG I/O ------------------------------------------------------------------------

def read_mask(path: str) -> np.ndarray:
    """
    Read an 8-bit single-channel PNG; foreground iff value >= 128.

    Raises:
        MaskFormatError: For multi-channel, 16-bit or unreadable files.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            values = np.array(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise MaskFormatError(f"{path}: cannot read mask ({e})")
    if mode != "L":
        raise MaskFormatError(f"{path}: mask must be 8-bit single-channel, got mode {mode}")
    return (values >= 128).astype(np.uint8)


def write_mask(mask: np.ndarray, path: str) -> None:
    values = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(values).save(path, format="PNG")


def read_image(path: str) -> np.ndarray:
    """Read an image as float [3, H, W] in [0, 1]; grayscale is replicated."""
    try:
        with Image.open(path) as img:
            rgb = np.array(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise MaskFormatError(f"{path}: cannot read image ({e})")
    return rgb.transpose(2, 0, 1) / 255.0


def write_image(image: np.ndarray, path: str) -> None:
    """Write [3, H, W] or [H, W] floats in [0, 1] as 8-bit PNG (gray when channels agree)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if np.array_equal(image[0], image[1]) and np.array_equal(image[0], image[2]):
            image = image[0]
        else:
            image = image.transpose(1, 2, 0)
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)).save(path, format="PNG")


def write_rgb(pixels: np.ndarray, path: str) -> None:
    """Write uint8 [H, W, 3] pixels."""
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def write_gray(pixels: np.ndarray, path: str) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PNG")


def write_dataset(samples: Sequence[Sample], root: str) -> str:
    """Emit images/, masks/ and metadata.csv under root; returns the CSV path."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for sample in samples:
        write_image(sample.image, os.path.join(root, sample.metadata.image_path))
        write_mask(sample.mask, os.path.join(root, sample.metadata.mask_path))
    csv_path = os.path.join(root, "metadata.csv")
    write_metadata_csv([s.metadata for s in samples], csv_path)
    return csv_path


# -- loading ------------------------------------------------------------------------

def resolve_path(root: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(root, path)


def load_blu(root: str, csv_path: Optional[str] = None, logger: Optional[RunLogger] = None,
             validator: Optional[InputValidator] = None) -> List[Sample]:
    """
    Load a dataset laid out as root/images, root/masks and root/metadata.csv.

    Args:
        root: Dataset directory; relative paths in the CSV resolve against it.
        csv_path: Metadata CSV, defaulting to root/metadata.csv.
        logger: Optional logger.
        validator: Optional validator instance.

    Returns:
        list: Samples in CSV order.

    Raises:
        DatasetError: Listing every item that could not be loaded.
    """
    logger = logger or get_logger()
    validator = validator or InputValidator()
    csv_path = csv_path or os.path.join(root, "metadata.csv")
    records = parse_metadata_csv(csv_path, logger=logger, validator=validator)

    samples: List[Sample] = []
    errors: Dict[str, str] = {}
    for record in records:
        if not record.mask_path:
            errors[record.image_id] = "mask_path is empty"
            continue
        image_path = resolve_path(root, record.image_path)
        mask_path = resolve_path(root, record.mask_path)
        if not os.path.isfile(image_path):
            errors[record.image_id] = f"missing image file {image_path}"
            continue
        if not os.path.isfile(mask_path):
            errors[record.image_id] = f"missing mask file {mask_path}"
            continue
        try:
            image = read_image(image_path)
            mask = read_mask(mask_path)
        except MaskFormatError as e:
            errors[record.image_id] = str(e)
            continue
        is_valid, error_msg = validator.validate_image_mask_pair(image, mask)
        if not is_valid:
            errors[record.image_id] = f"{mask_path}: {error_msg}"
            continue
        samples.append(Sample(image, mask, record))

    if errors:
        logger.error("DatasetLoader", "Dataset items failed to load", {"errors": errors})
        raise DatasetError(errors)
    logger.info("DatasetLoader", f"Loaded {len(samples)} samples", {"root": root, "count": len(samples)})
    return samples


# -- resizing -----------------------------------------------------------------------

def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of [C, H, W] (half-pixel centers)."""
    if image.shape[1:] == tuple(size):
        return image
    rows = interpolation_matrix(image.shape[1], size[0])
    cols = interpolation_matrix(image.shape[2], size[1])
    return np.clip(np.matmul(np.matmul(rows, image), cols.T), 0.0, 1.0)


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.int64), in_size - 1)


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize; output stays in {0, 1}."""
    if mask.shape == tuple(size):
        return mask
    rows = nearest_indices(mask.shape[0], size[0])
    cols = nearest_indices(mask.shape[1], size[1])
    return (mask[np.ix_(rows, cols)] > 0).astype(np.uint8)


def resize_sample(sample: Sample, side: int) -> Sample:
    """
    Resample a sample to side x side: bilinear image, nearest-neighbour mask, scaled phantom center.

    metadata.size_value is left in source units. Size bins are fit on and applied to the
    metadata value, so the size word in a prompt does not depend on the working resolution.

    Raises:
        ConfigurationError: If side is not positive.
    """
    if side <= 0:
        raise ConfigurationError(f"resize side must be positive, got {side}")
    height, width = sample.mask.shape
    if (height, width) == (side, side):
        return sample
    center = None
    if sample.center is not None:
        center = (sample.center[0] * side / width, sample.center[1] * side / height)
    return replace(sample, image=resize_image(sample.image, (side, side)),
                   mask=resize_mask(sample.mask, (side, side)), center=center)


# -- folds --------------------------------------------------------------------------

def make_folds(ids: Sequence[str], k: int = 5, seed: int = 0) -> List[FoldSplit]:
    """
    Seeded shuffle, then k contiguous validation blocks; training is the complement.

    Raises:
        ConfigurationError: If k < 2, k exceeds the number of ids, or ids repeat.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("image ids must be unique to build folds")
    if k < 2 or k > len(ids):
        raise ConfigurationError(f"cannot build {k} folds from {len(ids)} ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for index, block in enumerate(np.array_split(order, k)):
        val = set(int(i) for i in block)
        folds.append(FoldSplit(
            fold_index=index,
            train_ids=tuple(ids[i] for i in range(len(ids)) if i not in val),
            val_ids=tuple(ids[i] for i in block),
        ))
    return folds
