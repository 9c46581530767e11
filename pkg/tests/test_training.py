"""Tests for the per-fold training loop."""

import numpy as np
import pytest

from src.config import ConfigurationError, RunConfig
from src.data import FoldSplit, SyntheticConfig, generate_dataset, make_folds, resize_sample
from src.evaluation.metrics import image_metrics
from src.model import ModelConfig, XBusNet
from src.prompts import PromptBuilder, fit_size_bins
from src.tensor import ShapeError
from src.training import FoldTrainer, TrainConfig, train_fold


@pytest.fixture
def split(phantoms):
    return make_folds([s.image_id for s in phantoms], k=4, seed=0)[0]


@pytest.fixture
def short_run():
    return TrainConfig(iterations=3, batch_size=2, base_lr=1e-3, seed=5, log_every=1)


def test_trains_only_unfrozen_parameters(phantoms, split, tiny_config, short_run, logger):
    config = tiny_config()
    before = {name: p.data.copy() for name, p in XBusNet(config).named_parameters()}
    state = train_fold(phantoms, split, config, short_run, logger=logger)

    changed = []
    for name, p in state.model.named_parameters():
        if p.frozen:
            assert np.array_equal(p.data, before[name]), name
        elif not np.array_equal(p.data, before[name]):
            changed.append(name)
    assert changed
    assert any(name.startswith("fusion") for name in changed)


def test_state_carries_fold_artifacts(phantoms, split, tiny_config, short_run, logger):
    state = train_fold(phantoms, split, tiny_config(), short_run, logger=logger)
    assert state.fold == split.fold_index
    assert len(state.loss_trace) == 3
    assert all(np.isfinite(state.loss_trace))
    assert state.size_bins.t1 <= state.size_bins.t2
    assert logger.log_training_step.call_count == 3


def test_size_bins_come_from_training_rows(phantoms, split, tiny_config, short_run, logger, mocker):
    fit = mocker.patch("src.training.fit_size_bins", wraps=fit_size_bins)
    train_fold(phantoms, split, tiny_config(), short_run, logger=logger)
    by_id = {s.image_id: s for s in phantoms}
    assert fit.call_args[0][0] == [by_id[i].metadata.size_value for i in split.train_ids]


def test_same_seed_same_trace(phantoms, split, tiny_config, short_run, logger):
    a = train_fold(phantoms, split, tiny_config(), short_run, logger=logger)
    b = train_fold(phantoms, split, tiny_config(), short_run, logger=logger)
    assert a.loss_trace == b.loss_trace


def test_overlapping_split(phantoms, tiny_config, short_run, logger):
    ids = tuple(s.image_id for s in phantoms)
    with pytest.raises(ConfigurationError, match="overlap"):
        train_fold(phantoms, FoldSplit(0, ids, ids[:2]), tiny_config(), short_run, logger=logger)
    logger.error.assert_called_once()


def test_unknown_training_id(phantoms, tiny_config, short_run, logger):
    split = FoldSplit(0, ("nope", phantoms[0].image_id, phantoms[1].image_id), (phantoms[2].image_id,))
    with pytest.raises(ConfigurationError, match="not found"):
        train_fold(phantoms, split, tiny_config(), short_run, logger=logger)


def test_wrong_image_size(phantoms, split, tiny_config, short_run, logger):
    resized = [resize_sample(s, 64) for s in phantoms]
    with pytest.raises(ShapeError):
        train_fold(resized, split, tiny_config(), short_run, logger=logger)


def test_train_config_from_run_config():
    run = RunConfig()
    run.apply_overrides({"seed": "3", "train.iterations": "12", "train.batch_size": "2"})
    cfg = TrainConfig.from_run_config(run)
    assert (cfg.seed, cfg.iterations, cfg.batch_size) == (3, 12, 2)


@pytest.mark.parametrize("overrides", [{"iterations": 0}, {"batch_size": 0}, {"base_lr": 0.0},
                                       {"schedule": "step"}])
def test_train_config_rejects(overrides):
    with pytest.raises(ConfigurationError):
        TrainConfig(**overrides)


@pytest.mark.slow
def test_every_trainable_group_moves_in_fifty_steps(phantoms, split, tiny_config, logger):
    config = tiny_config()
    reference = XBusNet(config).parameter_groups()
    state = train_fold(phantoms, split, config, TrainConfig(iterations=50, batch_size=2, base_lr=1e-3, seed=2),
                       logger=logger)
    for group, parameters in state.model.parameter_groups().items():
        pairs = list(zip(parameters, reference[group]))
        if parameters[0].frozen:
            assert all(np.array_equal(p.data, q.data) for p, q in pairs), group
        else:
            assert any(not np.array_equal(p.data, q.data) for p, q in pairs), group


@pytest.mark.slow
def test_desk_profile_overfits_eight_phantoms(logger):
    samples = generate_dataset(SyntheticConfig(count=8, seed=21, image_size=64))
    ids = tuple(s.image_id for s in samples)
    split = FoldSplit(0, ids, ())
    config = ModelConfig.for_profile("desk", seed=0)
    state = FoldTrainer(config, TrainConfig(iterations=500, batch_size=4, base_lr=2e-3, seed=0),
                        logger=logger).train_fold(samples, split)

    builder = PromptBuilder(state.model.text_encoder, state.size_bins, config.image_size, logger=logger)
    prompts = [builder.training_prompts(s.metadata, s.mask) for s in samples]
    probability = state.model.predict_proba(np.stack([s.image for s in samples]), prompts)
    scores = [image_metrics(s.image_id, p[0] >= 0.5, s.mask).dice for s, p in zip(samples, probability)]
    assert np.mean(scores) >= 0.90
