import json

import numpy as np
import pandas as pd
import pytest

from tarflow import cli
from tarflow.cli import main
from tarflow.io.pnm import read_image, write_image

TAG = "1-64-1-1-gauss0.05"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    output = tmp_path_factory.mktemp("run")
    code = main(
        [
            "train",
            "--tag",
            TAG,
            "--dataset",
            "gaussian2d(0.5)",
            "--count",
            "64",
            "--batch-size",
            "32",
            "--epochs",
            "1",
            "--output",
            str(output),
        ]
    )
    assert code == 0
    return output


@pytest.fixture(scope="module")
def checkpoint(run_dir):
    return str(run_dir / "checkpoints" / "best.tfck")


def _sample(checkpoint, output, *extra):
    argv = ["sample", "--checkpoint", checkpoint, "--output", str(output)]
    return main([*argv, *extra])


def test_train_writes_the_run_directory(run_dir):
    config = json.loads((run_dir / "config.json").read_text())
    assert config["model"]["image_shape"] == [1, 1, 2]
    assert config["training"]["batch_size"] == 32
    checkpoints = sorted(p.name for p in (run_dir / "checkpoints").iterdir())
    assert checkpoints == ["best.tfck", "epoch-0001.tfck"]
    curve = pd.read_csv(run_dir / "loss.csv")
    assert curve["step"].tolist() == [1, 2]


def test_train_resumes(run_dir, tmp_path):
    resumed = tmp_path / "resumed"
    code = main(
        [
            "train",
            "--tag",
            TAG,
            "--dataset",
            "gaussian2d(0.5)",
            "--count",
            "64",
            "--batch-size",
            "32",
            "--epochs",
            "2",
            "--output",
            str(resumed),
            "--resume",
            str(run_dir / "checkpoints" / "epoch-0001.tfck"),
        ]
    )
    assert code == 0
    assert (resumed / "checkpoints" / "epoch-0002.tfck").exists()
    assert pd.read_csv(resumed / "loss.csv")["step"].tolist() == [3, 4]


def test_info(checkpoint, capsys):
    assert main(["info", "--checkpoint", checkpoint]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["tag"] == TAG
    assert info["image_shape"] == [1, 1, 2]
    assert info["epoch"] == 1 and info["step"] == 2
    assert info["parameters"] > 0


def test_sample_writes_images_and_grid(checkpoint, tmp_path):
    assert _sample(checkpoint, tmp_path, "--count", "4") == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "config.json",
        "grid.pgm",
        "sample-0000.pgm",
        "sample-0001.pgm",
        "sample-0002.pgm",
        "sample-0003.pgm",
    ]
    assert read_image(tmp_path / "sample-0000.pgm").shape == (1, 1, 2)


def test_sample_trajectory_frames(checkpoint, tmp_path):
    code = _sample(
        checkpoint, tmp_path, "--count", "1", "--trajectory", "--no-denoise"
    )
    assert code == 0
    frames = sorted(tmp_path.glob("sample-0000-frame-*.pgm"))
    assert len(frames) == 2


def test_sampling_is_reproducible(checkpoint, tmp_path):
    for name in ("a", "b"):
        assert _sample(checkpoint, tmp_path / name, "--seed", "3") == 0
    grid = (tmp_path / "a" / "grid.pgm").read_bytes()
    assert (tmp_path / "b" / "grid.pgm").read_bytes() == grid


def test_zero_guidance_weight_matches_no_flags(checkpoint, tmp_path):
    assert _sample(checkpoint, tmp_path / "w0", "--guidance-w", "0") == 0
    assert _sample(checkpoint, tmp_path / "plain") == 0
    for name in ("grid.pgm", "sample-0000.pgm"):
        guided = (tmp_path / "w0" / name).read_bytes()
        assert (tmp_path / "plain" / name).read_bytes() == guided


def test_class_label_on_unconditional_checkpoint(checkpoint, tmp_path):
    assert _sample(checkpoint, tmp_path, "--class", "0") == 2


def test_conditional_guidance_on_unconditional_checkpoint(
    checkpoint, tmp_path, capsys
):
    code = _sample(
        checkpoint, tmp_path, "--guidance", "conditional", "--guidance-w", "1"
    )
    assert code == 2
    assert "conditional guidance" in capsys.readouterr().err


def test_invalid_width_is_a_config_error(tmp_path, capsys):
    code = main(
        [
            "train",
            "--tag",
            "1-100-1-1-gauss0.05",
            "--dataset",
            "gaussian2d(0.5)",
            "--count",
            "8",
            "--output",
            str(tmp_path),
        ]
    )
    assert code == 2
    assert "multiple of 64" in capsys.readouterr().err


def test_eval_bpd_report(checkpoint, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    code = main(
        [
            "eval-bpd",
            "--checkpoint",
            checkpoint,
            "--dataset",
            "gaussian2d(0.5)",
            "--count",
            "16",
            "--output",
            str(report_path),
        ]
    )
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["n"] == 16 and report["draws"] == 1
    assert np.isfinite(report["mean_bpd"])
    assert json.loads(capsys.readouterr().out) == report


def test_denoise_command(checkpoint, tmp_path):
    source = write_image(np.array([[[0.2, -0.4]]]), tmp_path / "in.pgm")
    target = tmp_path / "out.pgm"
    code = main(
        [
            "denoise",
            "--checkpoint",
            checkpoint,
            "--input",
            str(source),
            "--output",
            str(target),
        ]
    )
    assert code == 0
    assert read_image(target).shape == (1, 1, 2)


def test_denoise_rejects_wrong_shape(checkpoint, tmp_path):
    source = write_image(np.zeros((1, 2, 2)), tmp_path / "in.pgm")
    code = main(
        [
            "denoise",
            "--checkpoint",
            checkpoint,
            "--input",
            str(source),
            "--output",
            str(tmp_path / "out.pgm"),
        ]
    )
    assert code == 2


def test_train_loads_the_dataset_once_with_the_training_seed(
    tmp_path, monkeypatch
):
    seeds = []
    ingest = cli.ingest_dataset

    def counting_ingest(*args, **kwargs):
        seeds.append(kwargs.get("seed"))
        return ingest(*args, **kwargs)

    monkeypatch.setattr(cli, "ingest_dataset", counting_ingest)
    code = main(
        [
            "train",
            "--tag",
            TAG,
            "--dataset",
            "gaussian2d(0.5)",
            "--count",
            "16",
            "--batch-size",
            "16",
            "--epochs",
            "1",
            "--seed",
            "5",
            "--output",
            str(tmp_path),
        ]
    )
    assert code == 0
    assert seeds == [5]
    config = json.loads((tmp_path / "config.json").read_text())
    assert config["model"]["image_shape"] == [1, 1, 2]


def test_sample_writes_the_resolved_config(checkpoint, tmp_path):
    code = _sample(
        checkpoint, tmp_path, "--count", "2", "--tau", "0.5", "--seed", "4"
    )
    assert code == 0
    config = json.loads((tmp_path / "config.json").read_text())
    assert config["model"]["image_shape"] == [1, 1, 2]
    assert config["sampling"]["count"] == 2
    assert config["sampling"]["seed"] == 4
    assert config["sampling"]["denoise"] is True
    guidance = config["sampling"]["guidance"]
    assert guidance["mode"] == "unconditional"
    assert guidance["temperature"] == 0.5
    assert guidance["schedule"] == "uniform"
    assert config["paths"]["checkpoint"] == checkpoint


def test_eval_bpd_writes_the_resolved_config(checkpoint, tmp_path):
    report_path = tmp_path / "eval" / "report.json"
    code = main(
        [
            "eval-bpd",
            "--checkpoint",
            checkpoint,
            "--dataset",
            "gaussian2d(0.5)",
            "--count",
            "8",
            "--draws",
            "2",
            "--output",
            str(report_path),
        ]
    )
    assert code == 0
    config = json.loads((tmp_path / "eval" / "config.json").read_text())
    assert config["evaluation"] == {"draws_per_example": 2, "seed": 0}
    assert config["paths"]["dataset"] == "gaussian2d(0.5)"
    assert config["paths"]["dataset_count"] == 8


def test_denoise_writes_the_resolved_config(checkpoint, tmp_path):
    source = write_image(np.array([[[0.1, 0.3]]]), tmp_path / "in.pgm")
    target = tmp_path / "out" / "clean.pgm"
    code = main(
        [
            "denoise",
            "--checkpoint",
            checkpoint,
            "--input",
            str(source),
            "--output",
            str(target),
            "--sigma",
            "0.02",
        ]
    )
    assert code == 0
    config = json.loads((tmp_path / "out" / "config.json").read_text())
    assert config["sampling"]["denoise_sigma"] == 0.02
    assert config["model"]["noise"]["magnitude"] == 0.05
