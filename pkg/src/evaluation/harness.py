"""Fold evaluation and the K-fold cross-validation runner."""

import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..checkpoint import save_checkpoint
from ..config import ConfigurationError, RunConfig
from ..data import FoldSplit, Sample, make_folds, resize_sample, write_rgb
from ..inference import TwoPassPredictor, binarize
from ..logger import RunLogger, get_logger
from ..model import ModelConfig, ModelState
from ..training import FoldTrainer, TrainConfig
from .metrics import ImageMetrics, image_metrics
from .overlay import render_overlay
from .report import build_report, emit_report

OVERLAY_SUFFIX = "_overlay.png"


def evaluate_fold(state: ModelState, samples: Sequence[Sample], fold: int, tau_seg: float = 0.5,
                  tau_proposal: float = 0.30, overlay_dir: Optional[str] = None,
                  logger: Optional[RunLogger] = None) -> Tuple[List[ImageMetrics], List[ImageMetrics]]:
    """
    Two-pass inference on validation samples.

    Masks are used only for scoring, after prediction.

    Returns:
        (two_pass_metrics, first_pass_metrics), aligned per image.
    """
    logger = logger or get_logger()
    predictor = TwoPassPredictor(state, tau_seg=tau_seg, tau_proposal=tau_proposal, logger=logger)
    side = state.config.image_size
    two_pass: List[ImageMetrics] = []
    first_pass: List[ImageMetrics] = []
    if overlay_dir:
        os.makedirs(overlay_dir, exist_ok=True)
    for sample in samples:
        sample = resize_sample(sample, side)
        result = predictor.predict(sample.image, sample.metadata)
        two_pass.append(image_metrics(sample.image_id, result.mask, sample.mask, fold))
        first_mask = binarize(result.first_pass_probability, tau_seg)
        first_pass.append(image_metrics(sample.image_id, first_mask, sample.mask, fold))
        if overlay_dir:
            write_rgb(render_overlay(result.mask, sample.mask, sample.image),
                      os.path.join(overlay_dir, sample.image_id + OVERLAY_SUFFIX))
    if two_pass:
        logger.info("FoldEvaluator", f"Fold {fold} evaluated", {
            "fold": fold, "images": len(two_pass),
            "mean_dice": sum(m.dice for m in two_pass) / len(two_pass),
        })
    return two_pass, first_pass


class CrossValidationRunner:
    """Trains and evaluates every fold, then emits one report."""

    def __init__(self, config: RunConfig, logger: Optional[RunLogger] = None):
        if config.seed is None:
            raise ConfigurationError("seed is mandatory for cross-validation")
        self.config = config
        self.logger = logger or get_logger()
        self.model_config = ModelConfig.from_run_config(config)
        self.train_config = TrainConfig.from_run_config(config)

    def checkpoint_for(self, fold: int) -> Optional[str]:
        path = self.config.checkpoint_path
        return path.format(fold=fold) if path else None

    def run(self, samples: Sequence[Sample], baseline: Optional[Dict[str, Any]] = None,
            save_checkpoints: bool = True) -> Dict[str, Any]:
        cfg = self.config
        side = self.model_config.image_size
        samples = [resize_sample(s, side) for s in samples]
        by_id = {s.image_id: s for s in samples}
        splits: List[FoldSplit] = make_folds(list(by_id), cfg.folds, cfg.seed)
        trainer = FoldTrainer(self.model_config, self.train_config, self.logger, cfg.to_dict())
        overlay_dir = cfg.report_dir or None

        all_two_pass: List[ImageMetrics] = []
        all_first_pass: List[ImageMetrics] = []
        for split in splits:
            state = trainer.train_fold(samples, split)
            path = self.checkpoint_for(split.fold_index)
            if save_checkpoints and path:
                save_checkpoint(state, path)
            two_pass, first_pass = evaluate_fold(
                state, [by_id[i] for i in split.val_ids], split.fold_index,
                cfg.tau_seg, cfg.tau_proposal, overlay_dir, self.logger,
            )
            all_two_pass.extend(two_pass)
            all_first_pass.extend(first_pass)

        report = build_report(all_two_pass, all_first_pass, cfg.tau_seg, cfg.tau_proposal,
                              cfg.to_dict(), baseline, self.logger)
        if cfg.report_dir:
            emit_report(report, cfg.report_dir, self.logger)
        return report


def run_cross_validation(samples: Sequence[Sample], config: RunConfig,
                         logger: Optional[RunLogger] = None, baseline: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return CrossValidationRunner(config, logger).run(samples, baseline)
