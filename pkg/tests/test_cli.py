"""Tests for the command-line front end and its exit codes."""

import json
import os

import pytest

from src.cli import EXIT_FAILURE, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, XBusNetCLI, fold_path, parse_assignments
from src.config import ConfigurationError
from src.data import load_blu
from src.tensor import NumericalError

QUIET = ["--set", "log.file=none", "--set", "log.level=ERROR"]

TINY_ARCH = [
    "--set", "gfe.image_size=32", "--set", "gfe.patch_size=8", "--set", "gfe.depth=2",
    "--set", "gfe.token_dim=16", "--set", "gfe.heads=2", "--set", "gfe.tap_layers=1,2",
    "--set", "gfe.reduce_dim=8", "--set", "lfe.widths=4,8,8,16,16", "--set", "lfe.heads=2",
]


@pytest.fixture
def cli():
    return XBusNetCLI()


def test_parse_assignments():
    assert parse_assignments(["a.b=1", " c = x "]) == {"a.b": "1", "c": "x"}
    with pytest.raises(ConfigurationError):
        parse_assignments(["novalue"])


def test_fold_path():
    assert fold_path("ckpt/fold{fold}.ckpt", 3) == "ckpt/fold3.ckpt"
    assert fold_path("model.ckpt", 3) == "model.ckpt"


def test_synth_writes_a_loadable_dataset(cli, tmp_path):
    out = tmp_path / "data"
    status = cli.run(["synth", "--out", str(out), "--seed", "1", "--count", "3"] + QUIET)
    assert status == EXIT_OK
    assert len(load_blu(str(out))) == 3
    assert (out / "vocabulary.txt").is_file()


def test_missing_fold_is_usage_error(cli, capsys):
    assert cli.run(["train", "--seed", "1"]) == EXIT_USAGE
    assert "--fold" in capsys.readouterr().out


def test_missing_seed_is_usage_error(cli, tmp_path, capsys):
    assert cli.run(["synth", "--out", str(tmp_path)] + QUIET) == EXIT_USAGE
    assert "seed is required" in capsys.readouterr().out


def test_fold_out_of_range(cli, tmp_path):
    assert cli.run(["train", "--fold", "7", "--seed", "1", "--data", str(tmp_path)] + QUIET) == EXIT_USAGE


def test_unknown_config_key(cli, tmp_path):
    assert cli.run(["synth", "--out", str(tmp_path), "--seed", "1", "--set", "nope=1"] + QUIET) == EXIT_USAGE


def test_paper_profile_is_accepted_by_flag_and_key(cli, tmp_path):
    parser = cli.build_parser()
    by_flag = cli.load_config(parser.parse_args(["synth", "--out", str(tmp_path), "--seed", "1",
                                                 "--profile", "paper"] + QUIET))
    by_key = cli.load_config(parser.parse_args(["synth", "--out", str(tmp_path), "--seed", "1",
                                                "--set", "model.profile=paper"] + QUIET))
    assert by_flag.profile == by_key.profile == "paper"


def test_unknown_gradcam_layer(cli, tmp_path, capsys):
    status = cli.run(["gradcam", "--seed", "1", "--image", "x.png", "--meta-row", "x", "--layer", "bogus",
                      "--out", str(tmp_path)] + QUIET)
    assert status == EXIT_USAGE
    assert "valid layers" in capsys.readouterr().out


def test_missing_image(cli, tmp_path):
    status = cli.run(["predict", "--seed", "1", "--image", str(tmp_path / "absent.png"), "--meta-row", "x"] + QUIET)
    assert status == EXIT_USAGE


def test_numerical_failure_exit_code(cli, tmp_path, mocker):
    mocker.patch.object(XBusNetCLI, "cmd_synth", side_effect=NumericalError("non-finite loss"))
    assert cli.run(["synth", "--out", str(tmp_path), "--seed", "1"] + QUIET) == EXIT_NUMERIC


def test_unexpected_failure_exit_code(cli, tmp_path, mocker):
    mocker.patch.object(XBusNetCLI, "cmd_synth", side_effect=RuntimeError("boom"))
    assert cli.run(["synth", "--out", str(tmp_path), "--seed", "1"] + QUIET) == EXIT_FAILURE


def test_train_predict_eval_gradcam(cli, tmp_path):
    data = tmp_path / "data"
    ckpt = str(tmp_path / "ckpt" / "fold{fold}.ckpt")
    assert cli.run(["synth", "--out", str(data), "--seed", "2", "--count", "6"] + QUIET) == EXIT_OK

    common = ["--seed", "2", "--set", "cv.folds=2", "--set", "train.iterations=2", "--set",
              "train.batch_size=2"] + TINY_ARCH + QUIET
    assert XBusNetCLI().run(["train", "--fold", "0", "--data", str(data), "--ckpt", ckpt] + common) == EXIT_OK
    assert os.path.isfile(fold_path(ckpt, 0) + ".manifest.txt")
    with open(fold_path(ckpt, 0) + ".trace.csv", encoding="utf-8") as handle:
        assert len(handle.read().splitlines()) == 3

    with open(data / "metadata.csv", encoding="utf-8") as handle:
        row = handle.read().splitlines()[1]
    image = str(data / "images" / "phantom_0000.png")
    out = tmp_path / "pred"
    status = XBusNetCLI().run(["predict", "--ckpt", ckpt, "--image", image, "--meta-row", row,
                               "--out", str(out)] + common)
    assert status == EXIT_OK
    assert (out / "phantom_0000_mask.png").is_file()
    diagnostics = json.loads((out / "phantom_0000_diagnostics.json").read_text(encoding="utf-8"))
    assert diagnostics["model_size"] == 32
    assert diagnostics["image_size"] == [64, 64]

    report_dir = tmp_path / "report"
    status = XBusNetCLI().run(["eval", "--ckpt", ckpt, "--data", str(data), "--report", str(report_dir),
                               "--folds", "0"] + common)
    assert status == EXIT_OK
    report = json.loads((report_dir / "report.json").read_text(encoding="utf-8"))
    assert [f["fold_index"] for f in report["folds"]] == [0]
    assert len(report["images"]) == 3

    status = XBusNetCLI().run(["gradcam", "--ckpt", ckpt, "--image", image, "--meta-row", row,
                               "--out", str(out)] + common)
    assert status == EXIT_OK
    assert (out / "phantom_0000_gradcam.png").is_file()
    assert (out / "phantom_0000_gradcam_overlay.png").is_file()
