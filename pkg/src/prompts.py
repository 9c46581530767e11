"""Prompt pipeline: metadata parsing, size bins, centroids, templates, tokenizer and text encoder."""

import csv
import io
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigurationError
from .logger import RunLogger, get_logger
from .nn import LayerNorm, Module, Parameter, TransformerBlock
from .tensor import ShapeError, concat, embedding, no_grad
from .validator import METADATA_COLUMNS, InputValidator, ValidationError


class EmptyMaskError(Exception):
    """Raised when a centroid is requested for a mask with no foreground."""
    pass


class Shape(str, Enum):
    OVAL = "oval"
    ROUND = "round"
    IRREGULAR = "irregular"


class Margin(str, Enum):
    CIRCUMSCRIBED = "circumscribed"
    INDISTINCT = "indistinct"
    ANGULAR = "angular"
    MICROLOBULATED = "microlobulated"
    SPICULATED = "spiculated"


class BiRads(str, Enum):
    G2 = "2"
    G3 = "3"
    G4 = "4"
    G4A = "4a"
    G4B = "4b"
    G4C = "4c"
    G5 = "5"


class SizeCategory(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class Quadrant(str, Enum):
    UPPER_INNER = "upper-inner"
    UPPER_OUTER = "upper-outer"
    LOWER_INNER = "lower-inner"
    LOWER_OUTER = "lower-outer"

    @property
    def words(self) -> str:
        return self.value.replace("-", " ")


@dataclass(frozen=True)
class LesionMetadata:
    image_id: str
    image_path: str
    mask_path: Optional[str]
    size_value: float
    shape: Shape
    margin: Margin
    birads: BiRads

    def without_mask(self) -> "LesionMetadata":
        return replace(self, mask_path=None)

    def to_row(self) -> Dict[str, str]:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "mask_path": self.mask_path or "",
            "size": repr(float(self.size_value)),
            "shape": self.shape.value,
            "margin": self.margin.value,
            "birads": self.birads.value,
        }


@dataclass(frozen=True)
class SizeBins:
    t1: float
    t2: float

    def __post_init__(self):
        if self.t1 > self.t2:
            raise ConfigurationError(f"size bins need t1 <= t2, got {self.t1} > {self.t2}")


@dataclass(frozen=True)
class Centroid:
    cx: float
    cy: float


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    unknown_count: int = 0


@dataclass(frozen=True)
class PromptPair:
    global_text: str
    local_text: str
    global_embedding: np.ndarray
    local_embedding: np.ndarray


# -- metadata -----------------------------------------------------------------

def _record_from_row(row: Dict[str, str]) -> LesionMetadata:
    return LesionMetadata(
        image_id=row["image_id"].strip(),
        image_path=row["image_path"].strip(),
        mask_path=(row.get("mask_path") or "").strip() or None,
        size_value=float(row["size"]),
        shape=Shape(row["shape"].strip().lower()),
        margin=Margin(row["margin"].strip().lower()),
        birads=BiRads(row["birads"].strip().lower()),
    )


def parse_metadata_csv(path: str, logger: Optional[RunLogger] = None,
                       validator: Optional[InputValidator] = None) -> List[LesionMetadata]:
    """
    Parse the dataset metadata CSV.

    Rows for images that carry more than one lesion (a repeated image_id, or a
    'lesions' column greater than one) are excluded with a warning.

    Args:
        path: CSV with header image_id,image_path,mask_path,size,shape,margin,birads.
        logger: Optional logger.
        validator: Optional validator instance.

    Returns:
        list: One LesionMetadata per accepted row, in file order.

    Raises:
        ValidationError: On a missing column or an invalid field; the message
            names the row number and the column.
    """
    logger = logger or get_logger()
    validator = validator or InputValidator()
    with open(path, newline="", encoding="utf-8") as handle:
        text = handle.read()
    if not text.strip():
        logger.warning("PromptPipeline", f"Metadata file {path} is empty")
        return []

    reader = csv.DictReader(io.StringIO(text))
    is_valid, error_msg = validator.validate_columns(reader.fieldnames or [])
    if not is_valid:
        raise ValidationError(f"{path}: {error_msg}")

    rows = list(reader)
    counts: Dict[str, int] = {}
    for row in rows:
        image_id = (row.get("image_id") or "").strip()
        counts[image_id] = counts.get(image_id, 0) + 1

    records: List[LesionMetadata] = []
    excluded = []
    for number, row in enumerate(rows, start=2):
        is_valid, error_msg = validator.validate_metadata_row(row)
        if not is_valid:
            raise ValidationError(f"{path}, row {number}, {error_msg}")
        image_id = row["image_id"].strip()
        lesions = (row.get("lesions") or "1").strip() or "1"
        if counts[image_id] > 1 or lesions != "1":
            excluded.append(image_id)
            continue
        records.append(_record_from_row(row))

    if excluded:
        logger.warning("PromptPipeline", "Excluded multi-lesion images",
                       {"count": len(set(excluded)), "image_ids": sorted(set(excluded))})
    if not records:
        logger.warning("PromptPipeline", f"Metadata file {path} holds no usable rows")
    return records


def parse_metadata_row(text: str, validator: Optional[InputValidator] = None) -> LesionMetadata:
    """Parse one inline CSV row given in schema column order."""
    validator = validator or InputValidator()
    values = next(csv.reader([text]), [])
    if len(values) != len(METADATA_COLUMNS):
        raise ValidationError(
            f"metadata row needs {len(METADATA_COLUMNS)} fields ({','.join(METADATA_COLUMNS)}), got {len(values)}")
    row = dict(zip(METADATA_COLUMNS, values))
    is_valid, error_msg = validator.validate_metadata_row(row)
    if not is_valid:
        raise ValidationError(f"metadata row: {error_msg}")
    return _record_from_row(row)


def write_metadata_csv(records: Sequence[LesionMetadata], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(METADATA_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


# -- size and location ------------------------------------------------------------

def fit_size_bins(training_sizes: Sequence[float]) -> SizeBins:
    """Tertile boundaries by linear interpolation between order statistics."""
    sizes = np.asarray(list(training_sizes), dtype=np.float64)
    if sizes.size < 3:
        raise ConfigurationError(f"size bins need at least 3 training sizes, got {sizes.size}")
    t1, t2 = np.quantile(sizes, [1.0 / 3.0, 2.0 / 3.0], method="linear")
    return SizeBins(float(t1), float(t2))


def discretize_size(size_value: float, bins: SizeBins) -> SizeCategory:
    if size_value <= bins.t1:
        return SizeCategory.SMALL
    if size_value <= bins.t2:
        return SizeCategory.MEDIUM
    return SizeCategory.LARGE


def centroid_from_mask(mask: np.ndarray) -> Centroid:
    """
    Centroid from image moments: (M10 / M00, M01 / M00).

    Raises:
        EmptyMaskError: If the mask has no foreground pixel.
    """
    rows, cols = np.nonzero(np.asarray(mask))
    m00 = rows.size
    if m00 == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return Centroid(cx=int(cols.sum()) / m00, cy=int(rows.sum()) / m00)


def quadrant_of(c: Centroid, height: int, width: int) -> Quadrant:
    # Image-left is treated as the inner side of the breast.
    upper = c.cy < height / 2
    inner = c.cx < width / 2
    if upper:
        return Quadrant.UPPER_INNER if inner else Quadrant.UPPER_OUTER
    return Quadrant.LOWER_INNER if inner else Quadrant.LOWER_OUTER


# -- templates --------------------------------------------------------------------

def verbalize_global(size: SizeCategory, quadrant: Optional[Quadrant]) -> str:
    size = SizeCategory(size)
    if quadrant is None:
        return f"a {size.value} lesion at an unknown location in the breast"
    return f"a {size.value} lesion in the {Quadrant(quadrant).words} quadrant of the breast"


def verbalize_local(m: LesionMetadata) -> str:
    return f"{m.shape.value} shape, {m.margin.value} margin, BI-RADS {m.birads.value}"


# -- tokenizer --------------------------------------------------------------------

PAD, UNK = "<pad>", "<unk>"
MAX_TOKENS = 16

_TEMPLATE_WORDS = (
    "a", "lesion", "in", "the", "quadrant", "of", "breast", "at", "an", "unknown", "location",
    "upper", "lower", "inner", "outer", "shape", "margin", "bi-rads",
)

_WORD_PATTERN = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


class Vocabulary:
    """Closed token table: pad, unknown, then every template word in a fixed order."""

    def __init__(self, words: Sequence[str]):
        self.tokens: List[str] = [PAD, UNK]
        for word in words:
            if word not in self.tokens:
                self.tokens.append(word)
        self._ids = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        words = list(_TEMPLATE_WORDS)
        words += [c.value for c in SizeCategory]
        words += [s.value for s in Shape] + [m.value for m in Margin] + [g.value for g in BiRads]
        return cls(words)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> Optional[int]:
        return self._ids.get(word)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for i, token in enumerate(self.tokens):
                handle.write(f"{token}\t{i}\n")


DEFAULT_VOCABULARY = Vocabulary.default()


def write_vocabulary(path: str, vocabulary: Vocabulary = DEFAULT_VOCABULARY) -> None:
    vocabulary.write(path)


def tokenize(text: str, vocabulary: Vocabulary = DEFAULT_VOCABULARY, max_length: int = MAX_TOKENS,
             logger: Optional[RunLogger] = None) -> TokenSequence:
    """Lowercase word tokenizer; hyphenated words stay whole; right-padded to max_length."""
    words = _WORD_PATTERN.findall(text.lower())
    ids = []
    unknown = []
    for word in words[:max_length]:
        token_id = vocabulary.id_of(word)
        if token_id is None:
            unknown.append(word)
            token_id = vocabulary.unk_id
        ids.append(token_id)
    if unknown:
        (logger or get_logger()).warning("PromptPipeline", "Out-of-vocabulary words in prompt",
                                         {"words": unknown})
    ids += [vocabulary.pad_id] * (max_length - len(ids))
    return TokenSequence(tuple(ids), len(unknown))


# -- text encoder -----------------------------------------------------------------

@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = len(DEFAULT_VOCABULARY)
    dim: int = 64
    heads: int = 4
    layers: int = 2
    max_length: int = MAX_TOKENS

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"text encoder dim {self.dim} not divisible by {self.heads} heads")


class TextEncoder(Module):
    """
    Small frozen transformer standing in for a pretrained text tower.

    A learned summary token is prepended to the word tokens; its final-layer
    representation (after a LayerNorm) is the prompt embedding.
    """

    def __init__(self, config: TextEncoderConfig, rng: np.random.Generator):
        self.config = config
        self.token_embedding = Parameter(rng.normal(0.0, 1.0, (config.vocab_size, config.dim)))
        self.summary_token = Parameter(rng.normal(0.0, 1.0, (1, 1, config.dim)))
        self.position_embedding = Parameter(rng.normal(0.0, 0.1, (1, config.max_length + 1, config.dim)))
        self.blocks = [TransformerBlock(config.dim, config.heads, rng) for _ in range(config.layers)]
        self.norm = LayerNorm(config.dim)
        self.freeze()

    def encode_batch(self, sequences: Sequence[TokenSequence]) -> np.ndarray:
        """Embed token sequences; returns an array of shape [B, dim]."""
        ids = np.array([s.ids for s in sequences], dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.config.max_length:
            raise ShapeError(f"token sequences must have length {self.config.max_length}, got {ids.shape}")
        with no_grad():
            words = embedding(self.token_embedding, ids)
            summary = self.summary_token.data.repeat(ids.shape[0], axis=0)
            x = concat([summary, words], axis=1) + self.position_embedding
            for block in self.blocks:
                x = block(x)
            return np.array(self.norm(x[:, 0, :]).data)

    def forward(self, tokens: TokenSequence) -> np.ndarray:
        return self.encode_batch([tokens])[0]


def encode_text(tokens: TokenSequence, encoder: TextEncoder) -> np.ndarray:
    return encoder(tokens)


class PromptBuilder:
    """
    Turns metadata and geometry into PromptPairs, caching embeddings per text.

    Args:
        encoder: Frozen text encoder.
        size_bins: Bins fitted on the current fold's training rows.
        image_size: Side of the square image used for quadrant mapping.
    """

    def __init__(self, encoder: TextEncoder, size_bins: SizeBins, image_size: int,
                 vocabulary: Vocabulary = DEFAULT_VOCABULARY, logger: Optional[RunLogger] = None):
        self.encoder = encoder
        self.size_bins = size_bins
        self.image_size = image_size
        self.vocabulary = vocabulary
        self.logger = logger or get_logger()
        self._cache: Dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text not in self._cache:
            tokens = tokenize(text, self.vocabulary, self.encoder.config.max_length, self.logger)
            self._cache[text] = encode_text(tokens, self.encoder)
        return self._cache[text]

    def build(self, metadata: LesionMetadata, quadrant: Optional[Quadrant]) -> PromptPair:
        global_text = verbalize_global(discretize_size(metadata.size_value, self.size_bins), quadrant)
        local_text = verbalize_local(metadata)
        return PromptPair(global_text, local_text, self.embed(global_text), self.embed(local_text))

    def training_prompts(self, metadata: LesionMetadata, mask: np.ndarray) -> PromptPair:
        """Prompts for a training sample, located by its ground-truth centroid."""
        height, width = mask.shape
        quadrant = quadrant_of(centroid_from_mask(mask), height, width)
        return self.build(metadata, quadrant)

