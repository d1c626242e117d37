import os
import subprocess
import sys

import pytest

from pgn import checkpoint, data, metrics
from pgn.cli import main

TINY = """\
epochs = 2
batch_size = 16

[data]
n_train = 64
n_test = 32
seed = 5

[classifier]
epochs = 1
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


@pytest.fixture(scope="module")
def pgn_run(tiny_cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    code = main(["train-pgn", "--config", tiny_cfg, "--mode", "enhance", "--loss", "ls", "--out", out])
    return code, out


def test_train_pgn_writes_artifacts(pgn_run):
    code, out = pgn_run
    assert code == 0
    rows = metrics.read_curves(os.path.join(out, "curves.csv"))
    assert [r.epoch for r in rows] == [1, 2]
    for name in ("run.txt", "pgn.ckpt", "classifier.ckpt", "summary.txt"):
        assert os.path.exists(os.path.join(out, name)), name
    head = open(os.path.join(out, "summary.txt")).readline()
    assert [c.strip() for c in head.split("|")][2:] == ["Vanilla", "Proposed", "EHA"]


def test_run_txt_reproduces_the_run(pgn_run, tmp_path):
    _, out = pgn_run
    run_txt = os.path.join(out, "run.txt")
    text = open(run_txt).read()
    assert "mode = enhance" in text and "loss_variant = least_squares" in text
    assert main(["train-pgn", "--config", run_txt, "--out", str(tmp_path)]) == 0
    a = open(os.path.join(out, "curves.csv")).read()
    assert a == open(tmp_path / "curves.csv").read()


def test_resume_after_stop(tiny_cfg, pgn_run, tmp_path):
    args = ["train-pgn", "--config", tiny_cfg, "--mode", "enhance", "--loss", "ls", "--out", str(tmp_path)]
    assert main(args + ["--stop-after", "1"]) == 0
    assert len(metrics.read_curves(tmp_path / "curves.csv")) == 1
    assert main(args + ["--resume"]) == 0
    assert (tmp_path / "curves.csv").read_text() == open(os.path.join(pgn_run[1], "curves.csv")).read()


def test_resume_with_different_config_fails(tiny_cfg, pgn_run, capsys):
    _, out = pgn_run
    code = main(["train-pgn", "--config", tiny_cfg, "--mode", "enhance", "--loss", "ce", "--resume", "--out", out])
    assert code == 1
    assert "pgn.checkpoint: CheckpointError" in capsys.readouterr().err


def test_evaluate_and_export_curves(pgn_run, tiny_cfg, tmp_path, capsys):
    _, out = pgn_run
    ckpt = os.path.join(out, "pgn.ckpt")
    assert main(["evaluate", "--config", tiny_cfg, "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
    assert "Proposed" in capsys.readouterr().out
    assert (tmp_path / "summary.txt").read_text() == open(os.path.join(out, "summary.txt")).read()
    csv_path = tmp_path / "c.csv"
    assert main(["export-curves", "--checkpoint", ckpt, "--csv", str(csv_path), "--out", str(tmp_path)]) == 0
    assert csv_path.read_text() == open(os.path.join(out, "curves.csv")).read()


def test_black_box_table_columns(tiny_cfg, pgn_run, tmp_path):
    clf = os.path.join(pgn_run[1], "classifier.ckpt")
    args = ["train-pgn", "--config", tiny_cfg, "--mode", "adversarial", "--loss", "ls", "--black-box"]
    args += ["--set", f"classifier.checkpoint={clf}", "--set", "epochs=1", "--out", str(tmp_path)]
    assert main(args) == 0
    head = (tmp_path / "summary.txt").read_text().splitlines()[0]
    assert [c.strip() for c in head.split("|")][2:] == ["Vanilla", "Proposed-B"]
    assert checkpoint.load_checkpoint(tmp_path / "pgn.ckpt").cfg.discriminator_init == "fresh"


def test_train_classifier(tiny_cfg, tmp_path):
    assert main(["train-classifier", "--config", tiny_cfg, "--out", str(tmp_path)]) == 0
    assert checkpoint.load_classifier(tmp_path / "classifier.ckpt").frozen


@pytest.mark.parametrize("fmt", data.FORMATS)
def test_gen_synthetic_data(tiny_cfg, tmp_path, fmt):
    assert main(["gen-synthetic-data", "--config", tiny_cfg, "--format", fmt, "--out", str(tmp_path)]) == 0
    ds = data.load_dataset(str(tmp_path), fmt)
    assert ds.train_images.shape == (64, 3, 32, 32) and ds.test_labels.shape == (32,)


def test_verify_theory_quick(tmp_path, capsys):
    assert main(["verify-theory", "--quick", "--out", str(tmp_path)]) == 0
    report = capsys.readouterr().out
    assert "checks passed" in report and "FAIL" not in report
    assert (tmp_path / "theory.txt").read_text() == report


def test_mode_is_mandatory(tiny_cfg, tmp_path, capsys):
    assert main(["train-pgn", "--config", tiny_cfg, "--loss", "ls", "--out", str(tmp_path)]) == 1
    assert main(["train-pgn", "--config", tiny_cfg, "--mode", "enhance", "--out", str(tmp_path)]) == 1
    lines = capsys.readouterr().err.splitlines()
    assert len(lines) == 2
    assert all(line.startswith("error: pgn.config: MissingFieldError: ") for line in lines)


@pytest.mark.parametrize(
    "argv, prefix",
    [
        (["evaluate", "--checkpoint", "/nonexistent.ckpt"], "error: pgn.checkpoint: CheckpointError: "),
        (["train-classifier", "--set", "foo=1"], "error: pgn.config: UnknownKeyError: "),
        (["train-classifier", "--set", "data.source=/nonexistent"], "error: pgn.data: DatasetError: "),
    ],
)
def test_errors_are_single_prefixed_lines(argv, prefix, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith(prefix), err


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["bake-cake"])
    assert info.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "pgn", "verify-theory", "--quick", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.splitlines()[-1].endswith("checks passed")
