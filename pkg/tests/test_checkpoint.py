"""Tests for checkpoint save/load and the manifest."""

import numpy as np
import pytest

from src.checkpoint import (
    MAGIC, CheckpointError, load_checkpoint, manifest_path, read_manifest, read_tensors, save_checkpoint,
    write_tensors,
)
from src.model import ModelState, XBusNet
from src.prompts import PromptPair, SizeBins
from src.tensor import ShapeError


@pytest.fixture
def state(tiny_config):
    return ModelState(model=XBusNet(tiny_config()), seed=0, size_bins=SizeBins(9.0, 14.0), fold=2,
                      run_config={"seed": 0})


def test_round_trip_is_bit_exact(state, tmp_path):
    path = str(tmp_path / "ckpt" / "fold2.ckpt")
    save_checkpoint(state, path)
    restored = load_checkpoint(path)
    original = dict(state.model.named_parameters())
    for name, parameter in restored.model.named_parameters():
        assert parameter.data.tobytes() == original[name].data.tobytes(), name
        assert parameter.frozen == original[name].frozen
    assert restored.size_bins == SizeBins(9.0, 14.0)
    assert restored.fold == 2
    assert restored.run_config == {"seed": 0}
    assert restored.config == state.config


def test_restored_model_predicts_identically(state, tmp_path, rng):
    path = str(tmp_path / "m.ckpt")
    for parameter in state.model.trainable_parameters():
        parameter.data = parameter.data + rng.normal(0.0, 0.01, parameter.shape)
    save_checkpoint(state, path)
    restored = load_checkpoint(path)
    images = rng.random((1, 3, 32, 32))
    prompts = [PromptPair("g", "l", rng.normal(size=16), rng.normal(size=16))]
    assert np.array_equal(state.model.predict_proba(images, prompts), restored.model.predict_proba(images, prompts))


def test_manifest_lists_every_parameter(state, tmp_path):
    path = str(tmp_path / "m.ckpt")
    assert save_checkpoint(state, path) == manifest_path(path)
    meta, entries = read_manifest(manifest_path(path))
    assert meta["fold"] == 2
    assert meta["size_bins"] == [9.0, 14.0]
    named = dict(state.model.named_parameters())
    assert [name for name, _, _ in entries] == list(named)
    assert all(named[name].shape == shape and named[name].frozen == frozen for name, shape, frozen in entries)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(str(path))


def test_truncated(tmp_path):
    path = tmp_path / "x.ckpt"
    write_tensors(str(path), [("w", np.ones((4, 4)))])
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_tensors(str(path))
    path.write_bytes(MAGIC + b"\x01")
    with pytest.raises(CheckpointError):
        read_tensors(str(path))


def test_missing_manifest(state, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(state, path)
    (tmp_path / "m.ckpt.manifest.txt").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_name_mismatch(state, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(state, path)
    values = read_tensors(path)
    values["extra.weight"] = np.zeros(3)
    write_tensors(path, list(values.items()))
    with pytest.raises(ShapeError, match="unknown"):
        load_checkpoint(path)


def test_shape_mismatch(state, tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(state, path)
    values = read_tensors(path)
    name = next(iter(values))
    values[name] = np.zeros(values[name].shape + (1,))
    write_tensors(path, list(values.items()))
    with pytest.raises(ShapeError, match=name):
        load_checkpoint(path)
