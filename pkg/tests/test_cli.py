"""End-to-end runs of the command-line interface, in process."""
from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from fsdg.cli import load_config_file, main
from fsdg.explain import ground_truth_matrix
from fsdg.hierarchy import load_hierarchy
from fsdg.tableio import read_rows

SLIM = [
    "--set", "model.transition_channels=16",
    "--set", 'model.widths="4,8,8,8"',
]


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    rc = main([
        "gen-synth", "--tree", "4,2", "--samples-per-class", "3",
        "--image-size", "16", "--domains", "studio,field",
        "--seed", "5", "--out-dir", str(out),
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(bench_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main([
        "train", "--manifest", str(bench_dir / "manifest.csv"),
        "--domain", "studio", "--mode", "fsdg", "--epochs", "2",
        "--batch-size", "8", "--prune", "--seed", "1",
        "--out-dir", str(out), *SLIM,
    ])
    assert rc == 0
    return out


def test_gen_synth_outputs(bench_dir):
    assert (bench_dir / "manifest.csv").is_file()
    assert (bench_dir / "hierarchy.txt").is_file()
    assert (bench_dir / "run.json").is_file()
    pngs = list((bench_dir / "images").rglob("*.png"))
    assert len(pngs) == 4 * 3 * 2  # classes x samples x domains


def test_gen_synth_rejects_unknown_domain(tmp_path, capsys):
    rc = main(["gen-synth", "--domains", "mars", "--out-dir", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("ERROR code=2 type=ConfigError")


def test_train_outputs(trained_dir):
    assert (trained_dir / "checkpoint.pt").is_file()
    assert (trained_dir / "checkpoint_fine.pt").is_file()
    assert (trained_dir / "steplog.jsonl").is_file()
    record = json.loads((trained_dir / "run.json").read_text())
    assert record["seed"] == 1
    assert record["config"]["train.mode"] == "fsdg"
    assert record["config"]["model.transition_channels"] == 16
    assert "checkpoint.pt" in record["outputs"]
    # the manifest input is hashed for provenance
    assert any(k.endswith("manifest.csv") for k in record["inputs"])
    assert all(len(v) == 64 for v in record["inputs"].values())


def test_eval_writes_per_level_accuracies(bench_dir, trained_dir, tmp_path, capsys):
    rc = main([
        "eval", "--checkpoint", str(trained_dir / "checkpoint.pt"),
        "--manifest", str(bench_dir / "manifest.csv"), "--domain", "field",
        "--out-dir", str(tmp_path),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "fine_accuracy=" in out
    header, rows = read_rows(tmp_path / "eval.csv")
    assert header == ["domain", "level", "accuracy", "n"]
    assert [r[1] for r in rows] == ["0", "1"]
    assert all(0.0 <= float(r[2]) <= 1.0 for r in rows)


def test_eval_works_on_pruned_checkpoint(bench_dir, trained_dir, tmp_path, capsys):
    rc = main([
        "eval", "--checkpoint", str(trained_dir / "checkpoint_fine.pt"),
        "--manifest", str(bench_dir / "manifest.csv"), "--domain", "studio",
        "--out-dir", str(tmp_path),
    ])
    assert rc == 0
    _, rows = read_rows(tmp_path / "eval.csv")
    assert len(rows) == 1  # the fine path has no coarse branches


def test_explain_outputs(bench_dir, trained_dir, tmp_path, capsys):
    rc = main([
        "explain", "--checkpoint", str(trained_dir / "checkpoint.pt"),
        "--manifest", str(bench_dir / "manifest.csv"), "--domain", "studio",
        "--top-n", "5", "--top-k", "3", "--out-dir", str(tmp_path),
    ])
    assert rc == 0
    for segment in ("all", "common", "specific", "confounding"):
        header, rows = read_rows(tmp_path / f"overlap_{segment}.csv")
        assert header == ["class", "0", "1", "2", "3"]
        if segment == "all":
            assert [r[1 + i] for i, r in enumerate(rows)] == ["3"] * 4
    header, rows = read_rows(tmp_path / "segment_stats.csv")
    assert header == ["class", "All", "Com", "Spe", "Conf", "RatioCom"]
    assert len(rows) == 4
    lines = (tmp_path / "relevance.jsonl").read_text().splitlines()
    assert len(lines) == 16  # one row per channel
    assert "mean_ratio_common=" in capsys.readouterr().out


def test_sclass_matches_library_matrix(bench_dir, tmp_path, capsys):
    rc = main([
        "sclass", "--hierarchy", str(bench_dir / "hierarchy.txt"),
        "--out-dir", str(tmp_path),
    ])
    assert rc == 0
    hierarchy = load_hierarchy(bench_dir / "hierarchy.txt")
    expected = ground_truth_matrix(hierarchy, range(4))
    _, rows = read_rows(tmp_path / "sclass.csv")
    got = np.array([[int(v) for v in r[1:]] for r in rows])
    assert np.array_equal(got, expected)


def test_gradcheck_passes_at_default_tolerance(tmp_path, capsys):
    rc = main(["gradcheck", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "ok worst=" in out
    header, rows = read_rows(tmp_path / "gradcheck.csv")
    assert header == ["quantity", "max_rel_err"]
    assert len(rows) >= 6
    assert all(float(r[1]) < 1e-4 for r in rows)


def test_gradcheck_numeric_failure_exits_4(tmp_path, capsys):
    rc = main(["gradcheck", "--tolerance", "0", "--out-dir", str(tmp_path)])
    assert rc == 4
    assert capsys.readouterr().err.startswith("ERROR code=4 type=NumericError")


def test_data_errors_exit_3(tmp_path, capsys):
    bad = tmp_path / "broken.csv"
    bad.write_text("path,domain,y0\na.png,studio,0\n")  # no hierarchy pragma
    rc = main([
        "train", "--manifest", str(bad), "--domain", "studio",
        "--out-dir", str(tmp_path / "out"),
    ])
    assert rc == 3
    assert capsys.readouterr().err.startswith("ERROR code=3 type=ManifestError")


def test_config_file_and_overrides(bench_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# comment\n"
        "train.epochs = 5\n"
        "train.batch_size = 8\n"
        "model.transition_channels = 16\n"
        'model.widths = "4,8,8,8"\n'
        "objective.lambda_cs = 0.1\n"
    )
    assert load_config_file(cfg)["train.epochs"] == 5
    out = tmp_path / "out"
    rc = main([
        "train", "--manifest", str(bench_dir / "manifest.csv"),
        "--domain", "studio", "--config", str(cfg),
        "--epochs", "2",                 # flag beats the config file
        "--set", "train.epochs=1",       # --set beats the flag
        "--out-dir", str(out),
    ])
    assert rc == 0
    record = json.loads((out / "run.json").read_text())
    assert record["config"]["train.epochs"] == 1
    assert record["config"]["objective.lambda_cs"] == 0.1
    steps = (out / "steplog.jsonl").read_text().splitlines()
    assert json.loads(steps[-1])["epoch"] == 0  # one epoch: 12 samples, 2 batches


def test_malformed_config_line_exits_2(bench_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs\n")
    rc = main([
        "train", "--manifest", str(bench_dir / "manifest.csv"),
        "--domain", "studio", "--config", str(cfg), "--out-dir", str(tmp_path),
    ])
    assert rc == 2
    assert "ConfigError" in capsys.readouterr().err


def test_console_script_is_installed():
    proc = subprocess.run(
        [sys.executable, "-m", "fsdg.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.strip()
