"""Input validation for metadata rows, masks, thresholds and fold splits."""

import math
from typing import Iterable, Mapping, Sequence, Tuple

import numpy as np


class ValidationError(Exception):
    """Raised when input validation fails."""
    pass


METADATA_COLUMNS = ("image_id", "image_path", "mask_path", "size", "shape", "margin", "birads")

SHAPES = ("oval", "round", "irregular")
MARGINS = ("circumscribed", "indistinct", "angular", "microlobulated", "spiculated")
BIRADS_GRADES = ("2", "3", "4", "4a", "4b", "4c", "5")


class InputValidator:
    """
    Validates dataset and inference inputs against the closed metadata vocabularies.
    Returns tuple of (is_valid, error_message) for clear error reporting.
    """

    def __init__(self):
        self.valid_shapes = list(SHAPES)
        self.valid_margins = list(MARGINS)
        self.valid_grades = list(BIRADS_GRADES)

    def validate_columns(self, header: Sequence[str]) -> Tuple[bool, str]:
        """
        Validate that a metadata header carries every required column.

        Args:
            header: Column names in file order.

        Returns:
            tuple: (is_valid, error_message)
        """
        missing = [c for c in METADATA_COLUMNS if c not in header]
        if missing:
            return False, f"missing column(s): {', '.join(missing)}"
        return True, ""

    def validate_choice(self, value: str, allowed: Sequence[str], column: str) -> Tuple[bool, str]:
        if value is None or not str(value).strip():
            return False, f"column '{column}': value cannot be empty"
        if str(value).strip().lower() not in allowed:
            return False, f"column '{column}': unknown value '{value}' (expected one of {', '.join(allowed)})"
        return True, ""

    def validate_size(self, value: str) -> Tuple[bool, str]:
        """
        Validate the metadata size field.

        Args:
            value: Raw CSV text.

        Returns:
            tuple: (is_valid, error_message)
        """
        try:
            size = float(value)
        except (TypeError, ValueError):
            return False, f"column 'size': '{value}' is not a number"
        if not math.isfinite(size) or size <= 0:
            return False, f"column 'size': must be greater than zero, got {value}"
        return True, ""

    def validate_metadata_row(self, row: Mapping[str, str]) -> Tuple[bool, str]:
        """
        Validate all fields of one metadata row.

        Args:
            row: Mapping from column name to raw CSV text.

        Returns:
            tuple: (is_valid, error_message); the message names the column.
        """
        for column in ("image_id", "image_path"):
            if not (row.get(column) or "").strip():
                return False, f"column '{column}': value cannot be empty"

        is_valid, error_msg = self.validate_size(row.get("size"))
        if not is_valid:
            return False, error_msg

        is_valid, error_msg = self.validate_choice(row.get("shape"), self.valid_shapes, "shape")
        if not is_valid:
            return False, error_msg

        is_valid, error_msg = self.validate_choice(row.get("margin"), self.valid_margins, "margin")
        if not is_valid:
            return False, error_msg

        is_valid, error_msg = self.validate_choice(row.get("birads"), self.valid_grades, "birads")
        if not is_valid:
            return False, error_msg

        return True, ""

    def validate_image_mask_pair(self, image: np.ndarray, mask: np.ndarray) -> Tuple[bool, str]:
        """
        Validate that an image [3,H,W] and mask [H,W] are aligned.

        Returns:
            tuple: (is_valid, error_message)
        """
        if image.ndim != 3 or image.shape[0] != 3:
            return False, f"image must have shape [3, H, W], got {image.shape}"
        if mask.shape != image.shape[1:]:
            return False, f"mask size {mask.shape} does not match image size {image.shape[1:]}"
        return True, ""

    def validate_threshold(self, tau: float, name: str = "threshold") -> Tuple[bool, str]:
        if not isinstance(tau, (int, float)) or not math.isfinite(tau):
            return False, f"{name} must be a number"
        if not 0.0 <= tau <= 1.0:
            return False, f"{name} must lie in [0, 1], got {tau}"
        return True, ""

    def validate_fold_split(self, train_ids: Iterable[str], val_ids: Iterable[str]) -> Tuple[bool, str]:
        """
        Validate that a train/validation split shares no image ids.

        Returns:
            tuple: (is_valid, error_message)
        """
        train, val = set(train_ids), set(val_ids)
        if not train:
            return False, "training split is empty"
        overlap = sorted(train & val)
        if overlap:
            shown = ", ".join(overlap[:5])
            return False, f"train and validation splits overlap on {len(overlap)} id(s): {shown}"
        return True, ""

    def validate_fold_index(self, fold: int, folds: int) -> Tuple[bool, str]:
        if not 0 <= fold < folds:
            return False, f"fold must be in [0, {folds}), got {fold}"
        return True, ""
