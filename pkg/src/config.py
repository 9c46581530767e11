"""Run configuration: plain-text key=value files plus flag and environment overrides."""

import os
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values


class ConfigurationError(Exception):
    """Raised when configuration is invalid or missing."""
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> Tuple[int, ...]:
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _parse_optional_str(text: str) -> Optional[str]:
    text = text.strip()
    return text if text and text.lower() != "none" else None


# key -> (attribute, parser)
_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "model.profile": ("profile", str),
    "seed": ("seed", int),
    "paths.data": ("data_root", str),
    "paths.checkpoint": ("checkpoint_path", str),
    "paths.report": ("report_dir", str),
    "train.iterations": ("iterations", int),
    "train.batch_size": ("batch_size", int),
    "train.base_lr": ("base_lr", float),
    "train.weight_decay": ("weight_decay", float),
    "train.loss.bce_weight": ("bce_weight", float),
    "train.loss.dice_weight": ("dice_weight", float),
    "cv.folds": ("folds", int),
    "eval.tau_seg": ("tau_seg", float),
    "eval.tau_proposal": ("tau_proposal", float),
    "sfa.residual.global": ("residual_global", _parse_bool),
    "sfa.residual.local": ("residual_local", _parse_bool),
    "model.use_gfe": ("use_gfe", _parse_bool),
    "model.use_lfe": ("use_lfe", _parse_bool),
    "model.use_sfa": ("use_sfa", _parse_bool),
    "gfe.image_size": ("image_size", int),
    "gfe.patch_size": ("patch_size", int),
    "gfe.depth": ("vit_depth", int),
    "gfe.token_dim": ("token_dim", int),
    "gfe.heads": ("vit_heads", int),
    "gfe.tap_layers": ("tap_layers", _parse_int_tuple),
    "gfe.reduce_dim": ("reduce_dim", int),
    "lfe.widths": ("lfe_widths", _parse_int_tuple),
    "lfe.heads": ("lfe_heads", int),
    "synth.count": ("synth_count", int),
    "synth.image_size": ("synth_image_size", int),
    "log.level": ("log_level", str),
    "log.file": ("log_file", _parse_optional_str),
}

# short spellings accepted by set() and get()
_ALIASES = {"profile": "model.profile"}

# Architecture keys default to the selected profile when left unset.
PROFILE_KEYS = ("gfe.image_size", "gfe.patch_size", "gfe.depth", "gfe.token_dim", "gfe.heads",
                "gfe.tap_layers", "gfe.reduce_dim", "lfe.widths", "lfe.heads")

VALID_PROFILES = ("desk", "paper")
VALID_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class RunConfig:
    """
    Handles configuration loading from a key=value file, the environment and flags.
    Every key has a typed attribute; architecture keys left as None follow the profile.
    """

    def __init__(self):
        """Initialize configuration with default values."""
        self.profile: str = "desk"
        self.seed: Optional[int] = None
        self.data_root: str = "data"
        self.checkpoint_path: str = "checkpoints/fold{fold}.ckpt"
        self.report_dir: str = "report"
        self.iterations: int = 1000
        self.batch_size: int = 4
        self.base_lr: float = 1e-4
        self.weight_decay: float = 0.01
        self.bce_weight: float = 0.5
        self.dice_weight: float = 0.5
        self.folds: int = 5
        self.tau_seg: float = 0.5
        self.tau_proposal: float = 0.30
        self.residual_global: bool = False
        self.residual_local: bool = True
        self.use_gfe: bool = True
        self.use_lfe: bool = True
        self.use_sfa: bool = True
        self.image_size: Optional[int] = None
        self.patch_size: Optional[int] = None
        self.vit_depth: Optional[int] = None
        self.token_dim: Optional[int] = None
        self.vit_heads: Optional[int] = None
        self.tap_layers: Optional[Tuple[int, ...]] = None
        self.reduce_dim: Optional[int] = None
        self.lfe_widths: Optional[Tuple[int, ...]] = None
        self.lfe_heads: Optional[int] = None
        self.synth_count: int = 40
        self.synth_image_size: int = 64
        self.log_level: str = "INFO"
        self.log_file: Optional[str] = "xbusnet.log"

    def set(self, key: str, value: Any) -> None:
        """
        Set one config key, parsing strings with the key's parser.

        Raises:
            ConfigurationError: If the key is unknown or the value does not parse.
        """
        key = _ALIASES.get(key, key)
        if key not in _KEYS:
            raise ConfigurationError(f"Unknown config key '{key}'")
        attribute, parser = _KEYS[key]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as e:
                raise ConfigurationError(f"Invalid value for '{key}': {e}")
        setattr(self, attribute, value)

    def get(self, key: str) -> Any:
        """
        Read one config key.

        Args:
            key: Dotted config key or one of its aliases, e.g. "train.iterations" or "profile".

        Returns:
            The parsed value held on this config.

        Raises:
            ConfigurationError: If the key is unknown.
        """
        key = _ALIASES.get(key, key)
        if key not in _KEYS:
            raise ConfigurationError(f"Unknown config key '{key}'")
        return getattr(self, _KEYS[key][0])

    def load_file(self, path: str) -> None:
        """
        Load keys from a plain-text key=value file.

        Args:
            path: Config file path; '#' starts a comment.

        Raises:
            ConfigurationError: If the file is missing or holds unknown keys.
        """
        if not os.path.isfile(path):
            raise ConfigurationError(f"Config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigurationError(f"Config key '{key}' has no value")
            self.set(key, value)

    def load_from_env(self) -> None:
        """Apply XBUSNET_LOG_LEVEL and XBUSNET_LOG_FILE when set."""
        level = os.getenv("XBUSNET_LOG_LEVEL")
        if level:
            self.set("log.level", level)
        log_file = os.getenv("XBUSNET_LOG_FILE")
        if log_file is not None:
            self.set("log.file", log_file)

    def apply_overrides(self, overrides: Mapping[str, Any]) -> None:
        """Apply flag overrides; None values are ignored."""
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)

    def validate(self) -> bool:
        """
        Validate that all required configuration is present and consistent.

        Returns:
            bool: True if configuration is valid.

        Raises:
            ConfigurationError: If a key is missing or out of range.
        """
        if self.seed is None:
            raise ConfigurationError("seed is required. Set it in the config file or pass --seed.")

        if self.profile not in VALID_PROFILES:
            raise ConfigurationError(f"model.profile must be one of {VALID_PROFILES}, got '{self.profile}'")

        if self.iterations < 1:
            raise ConfigurationError("train.iterations must be >= 1")

        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")

        if self.base_lr <= 0:
            raise ConfigurationError("train.base_lr must be positive")

        if self.weight_decay < 0:
            raise ConfigurationError("train.weight_decay cannot be negative")

        if self.bce_weight < 0 or self.dice_weight < 0 or self.bce_weight + self.dice_weight <= 0:
            raise ConfigurationError("train.loss weights must be non-negative and not both zero")

        if self.folds < 2:
            raise ConfigurationError("cv.folds must be >= 2")

        for key in ("eval.tau_seg", "eval.tau_proposal"):
            if not 0.0 <= self.get(key) <= 1.0:
                raise ConfigurationError(f"{key} must lie in [0, 1]")

        if not (self.use_gfe or self.use_lfe):
            raise ConfigurationError("At least one of model.use_gfe / model.use_lfe must be enabled")

        if self.log_level.upper() not in VALID_LOG_LEVELS:
            raise ConfigurationError(f"log.level must be one of {VALID_LOG_LEVELS}")

        if self.synth_count < 0:
            raise ConfigurationError("synth.count cannot be negative")

        return True

    def to_dict(self) -> Dict[str, Any]:
        """Effective configuration keyed by config key, echoed into reports and checkpoints."""
        result = {}
        for key, (attribute, _) in _KEYS.items():
            value = getattr(self, attribute)
            result[key] = list(value) if isinstance(value, tuple) else value
        return result

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        """
        Rebuild a config from to_dict() output, e.g. the copy stored in a checkpoint.

        Args:
            values: Config key to value; lists are turned back into tuples.

        Returns:
            RunConfig: A fresh config with every given key applied.

        Raises:
            ConfigurationError: If a key is unknown or a value does not parse.
        """
        config = cls()
        for key, value in values.items():
            if isinstance(value, list):
                value = tuple(value)
            config.set(key, value)
        return config

    def __repr__(self) -> str:
        return (
            f"RunConfig(profile={self.profile}, "
            f"seed={self.seed}, "
            f"iterations={self.iterations}, "
            f"folds={self.folds}, "
            f"log_level={self.log_level})"
        )
