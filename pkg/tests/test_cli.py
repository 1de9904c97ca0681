import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from psvit.cli import LOCK_NAME, main, parse_count
from psvit.data import synthetic_blobs, write_idx
from psvit.model import preset

TOY = ["--preset", "toy", "--classes", "2"]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def idx_pair(tmp_path):
    ds = synthetic_blobs(32, 16, 2, seed=0)
    pixels = np.round((ds.images[:, 0] + 1) * 127.5).clip(0, 255)
    write_idx(tmp_path / "img.idx", tmp_path / "lab.idx", pixels, ds.labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_parse_count():
    assert parse_count("4.7M") == 4.7e6
    assert parse_count("1.6b") == 1.6e9
    assert parse_count("1234") == 1234


def test_summary_and_expectations(tmp_path, capsys):
    assert main(["summary", "--expect-params", "4.7M", "--expect-flops", "1.6B", "--tol-pct", "20"]) == 0
    assert "params 4.84M" in capsys.readouterr().out
    assert main(["summary", "--expect-params", "3.6M", "--tol-pct", "5"]) == 1
    assert main(["summary", "--share", "--expect-params", "3.6M", "--out", str(tmp_path / "s")]) == 0
    table = rows(tmp_path / "s" / "summary.csv")
    assert [r["module"] for r in table] == ["backbone", "sampler", "vtm", "head", "total"]
    cfg = json.loads((tmp_path / "s" / "config.json").read_text())
    assert cfg["share_weights"] is True
    assert not (tmp_path / "s" / LOCK_NAME).exists()


def test_summary_n_override_changes_flops(capsys):
    main(["summary", "--preset", "ps-vit-b", "--n", "10"])
    low = capsys.readouterr().out
    main(["summary", "--preset", "ps-vit-b", "--n", "18"])
    high = capsys.readouterr().out
    assert "flops 3.07B" in low and "flops 8.72B" in high


def test_invalid_overrides_exit_1(tmp_path, capsys):
    assert main(["summary", "--heads", "5"]) == 1
    assert main(["summary", "--preset", "toy", "--n", "9"]) == 1
    assert main(["summary", "--bogus"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["summary", "--config", str(bad)]) == 1


def test_config_file_with_override(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(preset("toy").to_dict()))
    out = tmp_path / "o"
    assert main(["summary", "--config", str(path), "--depth", "3", "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["depth"] == 3 and cfg["dim"] == 16


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert main(["gradcheck", "--scope", "bilinear_sample", "--out", str(tmp_path / "g")]) == 0
    report = rows(tmp_path / "g" / "gradcheck.csv")
    assert len(report) == 5 and all(r["passed"] == "1" for r in report)
    assert main(["gradcheck", "--scope", "nope"]) == 1
    assert main(["gradcheck", "--scope", "layer_norm", "--tol", "1e-20", "--seeds", "1"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_train_is_deterministic_and_overfits(tmp_path, capsys):
    args = ["train", *TOY, "--synthetic", "64", "--epochs", "200", "--stop-at", "0.95", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "final.psvt").read_bytes() == (b / "final.psvt").read_bytes()
    assert (a / "best.psvt").exists()
    metrics = rows(a / "metrics.csv")
    assert list(metrics[0]) == ["epoch", "loss", "accuracy", "lr"]
    assert float(metrics[-1]["accuracy"]) >= 0.95


def test_train_zero_lr_is_flat(tmp_path, capsys):
    assert main(["train", *TOY, "--synthetic", "32", "--epochs", "4", "--lr", "0", "--out", str(tmp_path)]) == 0
    losses = {r["loss"] for r in rows(tmp_path / "metrics.csv")}
    assert len({round(float(x), 6) for x in losses}) == 1


def test_train_from_idx_leaves_inputs_untouched(tmp_path, idx_pair, capsys):
    before = [hashlib.sha256(p.read_bytes()).hexdigest() for p in idx_pair]
    out = tmp_path / "run"
    code = main(["train", *TOY, "--images", str(idx_pair[0]), "--labels", str(idx_pair[1]),
                 "--epochs", "2", "--out", str(out)])
    assert code == 0
    assert [hashlib.sha256(p.read_bytes()).hexdigest() for p in idx_pair] == before
    assert sorted(p.name for p in out.iterdir()) == ["best.psvt", "config.json", "final.psvt", "metrics.csv"]


def test_train_validation_failures(tmp_path, idx_pair, capsys):
    out = str(tmp_path / "x")
    assert main(["train", *TOY, "--out", out]) == 1
    assert main(["train", "--preset", "toy", "--classes", "1", "--images", str(idx_pair[0]),
                 "--labels", str(idx_pair[1]), "--out", out]) == 1
    assert main(["train", *TOY, "--images", str(tmp_path / "missing"), "--labels", str(idx_pair[1]),
                 "--out", out]) == 1
    assert main(["train", *TOY, "--synthetic", "8", "--epochs", "0", "--out", out]) == 1


def test_lockfile_blocks_concurrent_run(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / LOCK_NAME).write_text("123")
    assert main(["train", *TOY, "--synthetic", "8", "--epochs", "1", "--out", str(out)]) == 1
    assert "locked" in capsys.readouterr().err
    assert not (out / "metrics.csv").exists()


def test_eval_matches_in_memory_accuracy(tmp_path, capsys):
    from psvit.checkpoint import load_model
    from psvit.train import evaluate

    run = tmp_path / "run"
    main(["train", *TOY, "--synthetic", "64", "--epochs", "30", "--stop-at", "1.0", "--out", str(run)])
    assert main(["eval", "--checkpoint", str(run / "final.psvt"), "--synthetic", "64",
                 "--out", str(tmp_path / "ev")]) == 0
    (res,) = rows(tmp_path / "ev" / "eval.csv")
    expected = evaluate(load_model(run / "final.psvt"), synthetic_blobs(64, 16, 2, seed=0))
    assert float(res["top1"]) == expected["top1"] >= 0.95
    assert float(res["top5"]) >= float(res["top1"])


def test_eval_rejects_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.psvt"
    bad.write_bytes(b"PSVT\x01\x00\x00\x00\xff\xff\x00\x00")
    assert main(["eval", "--checkpoint", str(bad), "--synthetic", "4"]) == 1
    assert main(["eval", "--synthetic", "4"]) == 1


def test_viz_fresh_model_has_motionless_arrows(tmp_path, capsys):
    out = tmp_path / "viz"
    assert main(["viz", "--preset", "toy", "--iters", "3", "--synthetic", "2", "--out", str(out)]) == 0
    for b in range(2):
        table = rows(out / f"trajectory_{b:03d}.csv")
        assert len(table) == 3 * 4
        first = {r["index"]: (r["y_raw"], r["x_raw"]) for r in table if r["iteration"] == "1"}
        last = {r["index"]: (r["y_raw"], r["x_raw"]) for r in table if r["iteration"] == "3"}
        assert first == last
        svg = (out / f"trajectory_{b:03d}.svg").read_text()
        assert svg.count('class="arrow"') == 4


def test_viz_from_checkpoint_and_idx(tmp_path, idx_pair, capsys):
    run = tmp_path / "run"
    main(["train", *TOY, "--synthetic", "16", "--epochs", "1", "--out", str(run)])
    out = tmp_path / "viz"
    assert main(["viz", "--checkpoint", str(run / "final.psvt"), "--images", str(idx_pair[0]),
                 "--limit", "3", "--out", str(out)]) == 0
    assert len(list(out.glob("*.svg"))) == 3


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "psvit.cli", "summary", "--preset", "toy"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "total" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "psvit.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1
