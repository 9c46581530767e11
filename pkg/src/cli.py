"""Command-line interface: synth, train, eval, predict, gradcam and crossval subcommands."""

import argparse
import csv
import json
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from src.config import VALID_PROFILES, ConfigurationError, RunConfig
from src.data import (
    DatasetError, MaskFormatError, SyntheticConfig, generate_dataset, load_blu, make_folds, read_image,
    resize_image, resize_mask, resize_sample, write_dataset, write_gray, write_mask, write_rgb,
)
from src.evaluation.harness import evaluate_fold, run_cross_validation
from src.evaluation.overlay import heatmap_gray, render_heatmap_overlay
from src.evaluation.report import ReportError, build_report, emit_report, load_report
from src.evaluation.statistics import StatisticsError
from src.inference import TwoPassPredictor, grad_cam
from src.logger import RunLogger, set_logger
from src.model import DEFAULT_CAM_LAYER, FEATURE_MAPS, ModelConfig, ModelState
from src.optim import cosine_lr
from src.prompts import parse_metadata_row, write_vocabulary
from src.tensor import NumericalError, ShapeError
from src.training import FoldTrainer, TrainConfig
from src.validator import InputValidator, ValidationError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

USAGE_ERRORS = (ConfigurationError, ValidationError, DatasetError, MaskFormatError, CheckpointError,
                ReportError, StatisticsError, ShapeError, FileNotFoundError)


class UsageError(Exception):
    """argparse usage failure carrying its exit status."""

    def __init__(self, message: str, status: int = EXIT_USAGE):
        super().__init__(message)
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage()
        raise UsageError(message)

    def exit(self, status=0, message=None):
        if message:
            print(message)
        raise UsageError(message or "", status)


def parse_assignments(items: Optional[Sequence[str]]) -> Dict[str, str]:
    """Parse repeated --set KEY=VALUE flags."""
    result = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"--set expects KEY=VALUE, got '{item}'")
        result[key.strip()] = value.strip()
    return result


def fold_path(template: str, fold: int) -> str:
    return template.format(fold=fold) if "{fold}" in template else template


class XBusNetCLI:
    """
    Command-line front end.
    Each subcommand loads the run configuration, configures logging and maps
    failures to stable exit codes.
    """

    def __init__(self):
        self.config: Optional[RunConfig] = None
        self.logger: Optional[RunLogger] = None
        self.validator = InputValidator()
        self.parser = self.build_parser()

    def build_parser(self) -> argparse.ArgumentParser:
        common = _Parser(add_help=False)
        common.add_argument("--config", help="plain-text key=value config file")
        common.add_argument("--seed", help="random seed (config key 'seed')")
        common.add_argument("--profile", choices=VALID_PROFILES,
                            help="model profile (config key 'model.profile')")
        common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

        parser = _Parser(prog="xbusnet", description="Dual-prompt breast ultrasound segmentation")
        commands = parser.add_subparsers(dest="command", parser_class=_Parser)
        commands.required = True

        synth = commands.add_parser("synth", parents=[common], help="generate a synthetic phantom dataset")
        synth.add_argument("--out", required=True)
        synth.add_argument("--count")
        synth.add_argument("--image-size")

        train = commands.add_parser("train", parents=[common], help="train one cross-validation fold")
        train.add_argument("--fold", required=True, type=int)
        train.add_argument("--data")
        train.add_argument("--ckpt")

        evaluate = commands.add_parser("eval", parents=[common], help="evaluate fold checkpoints")
        evaluate.add_argument("--ckpt")
        evaluate.add_argument("--data")
        evaluate.add_argument("--report")
        evaluate.add_argument("--folds", default="all", help="'all' or a comma list of fold indices")
        evaluate.add_argument("--baseline-report")

        for name, help_text in (("predict", "two-pass prediction for one image"),
                                ("gradcam", "Grad-CAM heatmap for one image")):
            sub = commands.add_parser(name, parents=[common], help=help_text)
            sub.add_argument("--ckpt")
            sub.add_argument("--fold", type=int, default=0)
            sub.add_argument("--image", required=True)
            sub.add_argument("--meta-row", required=True, help="metadata CSV row in schema column order")
            sub.add_argument("--out", default=".")
            if name == "gradcam":
                sub.add_argument("--layer", default=DEFAULT_CAM_LAYER)

        crossval = commands.add_parser("crossval", parents=[common], help="train and evaluate every fold")
        crossval.add_argument("--data")
        crossval.add_argument("--report")
        crossval.add_argument("--baseline-report")
        return parser

    # -- setup --------------------------------------------------------------------

    def load_config(self, args: argparse.Namespace) -> RunConfig:
        config = RunConfig()
        if args.config:
            config.load_file(args.config)
        config.load_from_env()
        config.apply_overrides(parse_assignments(args.set))
        config.apply_overrides({
            "seed": args.seed,
            "model.profile": args.profile,
            "paths.data": getattr(args, "data", None),
            "paths.report": getattr(args, "report", None),
            "paths.checkpoint": getattr(args, "ckpt", None),
            "synth.count": getattr(args, "count", None),
            "synth.image_size": getattr(args, "image_size", None),
        })
        config.validate()
        return config

    def setup_logger(self) -> None:
        self.logger = RunLogger(log_file=self.config.log_file, log_level=self.config.log_level)
        set_logger(self.logger)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Parse argv and run one subcommand.

        Returns:
            int: 0 on success, 2 on usage/config/input errors, 3 on numeric failure.
        """
        try:
            args = self.parser.parse_args(argv)
        except UsageError as e:
            if e.status != EXIT_OK:
                print(f"✗ Usage error: {e}")
            return e.status

        handler = getattr(self, "cmd_" + args.command)
        try:
            self.config = self.load_config(args)
            self.setup_logger()
            handler(args)
            return EXIT_OK
        except NumericalError as e:
            print(f"\n✗ Numerical failure: {e}")
            self._log_failure(e, args.command)
            return EXIT_NUMERIC
        except USAGE_ERRORS as e:
            print(f"\n✗ {type(e).__name__}: {e}")
            self._log_failure(e, args.command)
            return EXIT_USAGE
        except Exception as e:
            print(f"\n✗ Unexpected error: {e}")
            self._log_failure(e, args.command)
            return EXIT_FAILURE

    def _log_failure(self, error: Exception, command: str) -> None:
        if self.logger:
            self.logger.log_error(error, {"component": "XBusNetCLI", "command": command})

    # -- helpers ------------------------------------------------------------------

    def _load_samples(self, root: str):
        samples = load_blu(root, logger=self.logger, validator=self.validator)
        side = ModelConfig.from_run_config(self.config).image_size
        return [resize_sample(s, side) for s in samples]

    def _checkpoint(self, fold: int) -> ModelState:
        path = fold_path(self.config.checkpoint_path, fold)
        state = load_checkpoint(path)
        print(f"✓ Checkpoint loaded: {path}")
        return state

    def _predictor(self, state: ModelState) -> TwoPassPredictor:
        return TwoPassPredictor(state, tau_seg=self.config.tau_seg, tau_proposal=self.config.tau_proposal,
                                logger=self.logger)

    def _single_image(self, args: argparse.Namespace):
        if not os.path.isfile(args.image):
            raise FileNotFoundError(f"image not found: {args.image}")
        metadata = parse_metadata_row(args.meta_row, self.validator).without_mask()
        state = self._checkpoint(args.fold)
        original = read_image(args.image)
        side = state.config.image_size
        image = resize_image(original, (side, side))
        os.makedirs(args.out, exist_ok=True)
        return state, metadata, original, image

    # -- commands -----------------------------------------------------------------

    def cmd_synth(self, args: argparse.Namespace) -> None:
        cfg = SyntheticConfig(count=self.config.synth_count, seed=self.config.seed,
                              image_size=self.config.synth_image_size)
        if cfg.count == 0:
            print("⚠ --count 0: writing an empty dataset")
            self.logger.warning("XBusNetCLI", "Writing an empty synthetic dataset", {"out": args.out})
        samples = generate_dataset(cfg)
        csv_path = write_dataset(samples, args.out)
        write_vocabulary(os.path.join(args.out, "vocabulary.txt"))
        self.logger.info("XBusNetCLI", "Synthetic dataset written", {"out": args.out, "count": cfg.count})
        print(f"✓ {cfg.count} phantoms written to {args.out} (metadata: {csv_path})")

    def cmd_train(self, args: argparse.Namespace) -> None:
        cfg = self.config
        is_valid, error_msg = self.validator.validate_fold_index(args.fold, cfg.folds)
        if not is_valid:
            raise ConfigurationError(error_msg)
        samples = self._load_samples(cfg.data_root)
        split = make_folds([s.image_id for s in samples], cfg.folds, cfg.seed)[args.fold]
        train_config = TrainConfig.from_run_config(cfg)
        trainer = FoldTrainer(ModelConfig.from_run_config(cfg), train_config, self.logger, cfg.to_dict())
        print(f"\n[Training] fold {args.fold}: {len(split.train_ids)} train / {len(split.val_ids)} val images")
        state = trainer.train_fold(samples, split)

        path = fold_path(cfg.checkpoint_path, args.fold)
        manifest = save_checkpoint(state, path)
        trace_path = path + ".trace.csv"
        with open(trace_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["step", "loss", "lr"])
            for step, loss in enumerate(state.loss_trace):
                writer.writerow([step, repr(loss), repr(cosine_lr(step, train_config.iterations, train_config.base_lr))])
        print(f"✓ Checkpoint: {path}")
        print(f"✓ Manifest:   {manifest}")
        print(f"✓ Loss trace: {trace_path} (final loss {state.loss_trace[-1]:.4f})")

    def _eval_folds(self, spec: str) -> List[int]:
        if spec == "all":
            return list(range(self.config.folds))
        try:
            folds = [int(part) for part in spec.split(",") if part.strip()]
        except ValueError:
            raise ConfigurationError(f"--folds must be 'all' or a comma list of integers, got '{spec}'")
        for fold in folds:
            is_valid, error_msg = self.validator.validate_fold_index(fold, self.config.folds)
            if not is_valid:
                raise ConfigurationError(error_msg)
        return folds

    def cmd_eval(self, args: argparse.Namespace) -> None:
        cfg = self.config
        folds = self._eval_folds(args.folds)
        if len(folds) > 1 and "{fold}" not in cfg.checkpoint_path:
            raise ConfigurationError("evaluating several folds needs a checkpoint path containing '{fold}'")
        baseline = load_report(args.baseline_report) if args.baseline_report else None
        samples = self._load_samples(cfg.data_root)
        by_id = {s.image_id: s for s in samples}

        two_pass, first_pass = [], []
        for fold in folds:
            state = self._checkpoint(fold)
            seed = state.run_config.get("seed", cfg.seed)
            count = state.run_config.get("cv.folds", cfg.folds)
            split = make_folds(list(by_id), count, seed)[fold]
            ours, first = evaluate_fold(state, [by_id[i] for i in split.val_ids], fold, cfg.tau_seg,
                                        cfg.tau_proposal, cfg.report_dir, self.logger)
            two_pass.extend(ours)
            first_pass.extend(first)
            print(f"✓ Fold {fold}: {len(ours)} images evaluated")

        report = build_report(two_pass, first_pass, cfg.tau_seg, cfg.tau_proposal, cfg.to_dict(), baseline,
                              self.logger)
        path = emit_report(report, cfg.report_dir, self.logger)
        self._print_summary(report, path)

    def cmd_predict(self, args: argparse.Namespace) -> None:
        state, metadata, original, image = self._single_image(args)
        result = self._predictor(state).predict(image, metadata)
        size = original.shape[1:]
        stem = os.path.join(args.out, metadata.image_id)
        write_mask(resize_mask(result.mask, size), stem + "_mask.png")
        write_mask(resize_mask(result.proposal, size), stem + "_proposal.png")
        diagnostics = dict(result.diagnostics, model_size=state.config.image_size, image_size=list(size))
        with open(stem + "_diagnostics.json", "w", encoding="utf-8", newline="\n") as handle:
            json.dump(diagnostics, handle, indent=2, sort_keys=True)
            handle.write("\n")
        if result.diagnostics["fallback"]:
            print("⚠ Empty proposal: first-pass prediction kept (fallback)")
        print(f"✓ Mask: {stem}_mask.png")
        print(f"✓ Diagnostics: {stem}_diagnostics.json")

    def cmd_gradcam(self, args: argparse.Namespace) -> None:
        if args.layer not in FEATURE_MAPS:
            raise ValidationError(f"unknown layer '{args.layer}'; valid layers: {', '.join(FEATURE_MAPS)}")
        state, metadata, original, image = self._single_image(args)
        prompts = self._predictor(state).predict(image, metadata).prompts
        cam = grad_cam(state, image, prompts, args.layer)
        cam = np.clip(resize_image(cam[None], original.shape[1:])[0], 0.0, 1.0)
        stem = os.path.join(args.out, f"{metadata.image_id}_gradcam")
        write_gray(heatmap_gray(cam), stem + ".png")
        write_rgb(render_heatmap_overlay(cam, original), stem + "_overlay.png")
        self.logger.info("XBusNetCLI", "Grad-CAM written", {"layer": args.layer, "out": stem + ".png"})
        print(f"✓ Heatmap ({args.layer}): {stem}.png")
        print(f"✓ Overlay: {stem}_overlay.png")

    def cmd_crossval(self, args: argparse.Namespace) -> None:
        cfg = self.config
        baseline = load_report(args.baseline_report) if args.baseline_report else None
        samples = self._load_samples(cfg.data_root)
        print(f"\n[Cross-validation] {len(samples)} images, {cfg.folds} folds, profile {cfg.profile}")
        report = run_cross_validation(samples, cfg, self.logger, baseline)
        self._print_summary(report, os.path.join(cfg.report_dir, "report.json"))

    def _print_summary(self, report: Dict, path: str) -> None:
        print("\n" + "=" * 60)
        print("  EVALUATION SUMMARY")
        print("=" * 60)
        for name, block in report["summary"].items():
            print(f"  {name:<5} {block['mean']:.4f} ± {block['sd']:.4f}")
        print(f"\n✓ Report: {path}")
