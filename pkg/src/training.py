"""Per-fold training loop: AdamW with a cosine schedule over the segmentation loss."""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigurationError, RunConfig
from .data import FoldSplit, Sample
from .logger import RunLogger, get_logger
from .model import ModelConfig, ModelState, XBusNet, segmentation_loss
from .optim import adamw_step, cosine_lr, create_optimizer_state
from .prompts import PromptBuilder, fit_size_bins
from .tensor import NumericalError, ShapeError, backward
from .validator import InputValidator


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 4
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    bce_weight: float = 0.5
    dice_weight: float = 0.5
    seed: int = 0
    schedule: str = "cosine"
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("train.iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigurationError("train.base_lr must be positive")
        if self.schedule != "cosine":
            raise ConfigurationError(f"unsupported schedule '{self.schedule}'")

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "TrainConfig":
        return cls(
            iterations=config.iterations, batch_size=config.batch_size, base_lr=config.base_lr,
            weight_decay=config.weight_decay, bce_weight=config.bce_weight, dice_weight=config.dice_weight,
            seed=config.seed if config.seed is not None else 0,
        )


class FoldTrainer:
    """
    Trains one network per fold.

    Size bins are fitted on the training rows of the split only, and every
    training prompt is located by the ground-truth mask centroid.
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig,
                 logger: Optional[RunLogger] = None, run_config: Optional[Dict] = None):
        self.model_config = model_config
        self.train_config = train_config
        self.logger = logger or get_logger()
        self.run_config = run_config or {}
        self.validator = InputValidator()

    def train_fold(self, samples: Sequence[Sample], split: FoldSplit) -> ModelState:
        """
        Train on split.train_ids.

        Args:
            samples: All available samples; only training ids are read.
            split: Fold split with disjoint id sets.

        Returns:
            ModelState with size bins, fold index and the per-step loss trace.

        Raises:
            ConfigurationError: If the splits overlap or training ids are unknown.
            NumericalError: If the loss or a gradient becomes non-finite.
        """
        is_valid, error_msg = self.validator.validate_fold_split(split.train_ids, split.val_ids)
        if not is_valid:
            self.logger.error("FoldTrainer", "Invalid fold split", {"fold": split.fold_index, "error": error_msg})
            raise ConfigurationError(error_msg)

        by_id = {s.image_id: s for s in samples}
        unknown = [i for i in split.train_ids if i not in by_id]
        if unknown:
            raise ConfigurationError(f"training ids not found in dataset: {unknown[:5]}")
        train = [by_id[i] for i in split.train_ids]
        size = self.model_config.image_size
        for sample in train:
            if sample.mask.shape != (size, size):
                raise ShapeError(f"{sample.image_id}: expected {size}x{size}, got {sample.mask.shape}")

        cfg = self.train_config
        bins = fit_size_bins([s.metadata.size_value for s in train])
        model = XBusNet(self.model_config)
        builder = PromptBuilder(model.text_encoder, bins, size, logger=self.logger)
        prompts = [builder.training_prompts(s.metadata, s.mask) for s in train]
        images = np.stack([s.image for s in train])
        masks = np.stack([s.mask[None].astype(np.float64) for s in train])
        e_global = np.stack([p.global_embedding for p in prompts])
        e_local = np.stack([p.local_embedding for p in prompts])

        params = model.parameters()
        state = create_optimizer_state(params, cfg.base_lr, cfg.weight_decay, cfg.iterations)
        rng = np.random.default_rng([cfg.seed, split.fold_index])
        batch = min(cfg.batch_size, len(train))
        self.logger.info("FoldTrainer", f"Training fold {split.fold_index}", {
            "fold": split.fold_index, "train": len(train), "iterations": cfg.iterations, "batch_size": batch,
            "size_bins": [bins.t1, bins.t2], "trainable": len(model.trainable_parameters()),
        })

        trace: List[float] = []
        for step in range(cfg.iterations):
            index = np.sort(rng.choice(len(train), size=batch, replace=False))
            lr = cosine_lr(step, cfg.iterations, cfg.base_lr)
            model.zero_grad()
            logits = model(images[index], e_global[index], e_local[index])
            loss = segmentation_loss(logits, masks[index], cfg.bce_weight, cfg.dice_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at fold {split.fold_index}, step {step}")
            backward(loss)
            adamw_step(state, params, lr)
            trace.append(value)
            if step % cfg.log_every == 0 or step == cfg.iterations - 1:
                self.logger.log_training_step(split.fold_index, step, value, lr)

        self.logger.info("FoldTrainer", f"Fold {split.fold_index} finished",
                         {"fold": split.fold_index, "final_loss": trace[-1]})
        return ModelState(model=model, seed=self.model_config.seed, size_bins=bins, fold=split.fold_index,
                          run_config=dict(self.run_config), loss_trace=trace)


def train_fold(samples: Sequence[Sample], split: FoldSplit, model_config: ModelConfig,
               train_config: TrainConfig, logger: Optional[RunLogger] = None) -> ModelState:
    return FoldTrainer(model_config, train_config, logger).train_fold(samples, split)
