import json
import subprocess
import sys

import pytest

from ced.analysis import read_jsonl
from ced.cli import main
from ced.corpus import load_corpus
from ced.model import load_checkpoint
from ced.training import TrainConfig, evaluate_loss, validation_batches

SMALL = ["--sessions", "8", "--turns", "6", "--dim", "8", "--frames-min", "3", "--frames-max", "6"]


def files(root):
    # the top-level run manifest carries a timestamp; everything else must be stable
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p != root / "manifest.json"}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "corpus"), "--seed", "7", "--alpha", "0.8"] + SMALL) == 0
    assert main(["train", "--corpus", str(root / "corpus"), "--out", str(root / "run"), "--preset", "toy",
                 "--max-epochs", "2", "--lr", "1e-3", "--val-fraction", "0.25", "--seed", "1"]) == 0
    return root


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "3"] + SMALL) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_synth_manifest_lists_outputs(workdir):
    m = json.loads((workdir / "corpus" / "manifest.json").read_text())
    listed = set(m["output_paths"])
    on_disk = {str(workdir / "corpus" / p) for p in files(workdir / "corpus")} | {str(workdir / "corpus" / "manifest.json")}
    assert listed == on_disk
    assert m["command"] == "synth" and m["seeds"] == {"seed": 7}
    assert len(m["config_hash"]) == 64


def test_synth_bad_alpha_exit_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--alpha", "1.5"]) == 2
    assert "alpha" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_existing_output_needs_force(workdir, tmp_path):
    out = tmp_path / "c"
    assert main(["synth", "--out", str(out), "--seed", "1"] + SMALL) == 0
    assert main(["synth", "--out", str(out), "--seed", "1"] + SMALL) == 2
    assert main(["synth", "--out", str(out), "--seed", "1", "--force"] + SMALL) == 0


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("synth:\n  n_sessions: 3\n  dim: 4\n  alpha: 0.2\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o"), "--alpha", "0.6"]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert (m["config"]["n_sessions"], m["config"]["dim"], m["config"]["alpha"]) == (3, 4, 0.6)


def test_train_outputs(workdir):
    history = read_jsonl(workdir / "run" / "history.jsonl")
    assert [h["epoch"] for h in history] == [1, 2]
    assert (workdir / "run" / "best.ckpt").exists()
    assert len(read_jsonl(workdir / "run" / "timings.jsonl")) == 2


def test_train_one_epoch(workdir, tmp_path):
    assert main(["train", "--corpus", str(workdir / "corpus"), "--out", str(tmp_path / "r"), "--preset", "toy",
                 "--max-epochs", "1"]) == 0
    assert len(read_jsonl(tmp_path / "r" / "history.jsonl")) == 1


def test_train_missing_corpus(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) != 0
    assert not (tmp_path / "r").exists()


def test_reload_reproduces_val_accuracy(workdir):
    model, extra = load_checkpoint(workdir / "run" / "best.ckpt")
    m = json.loads((workdir / "run" / "manifest.json").read_text())
    tcfg = TrainConfig.from_dict(m["config"]["train"])
    _, acc = evaluate_loss(model, validation_batches(load_corpus(workdir / "corpus"), tcfg))
    assert abs(acc - extra["val_accuracy"]) <= 1e-6


def test_validate_repeat_deterministic(workdir, tmp_path):
    outs = []
    for name in ("a", "b"):
        argv = ["validate", "--checkpoint", str(workdir / "run" / "best.ckpt"), "--corpus", str(workdir / "corpus"),
                "--out", str(tmp_path / name), "--repeats", "1", "--seed", "3"]
        assert main(argv) == 0
        outs.append(files(tmp_path / name))
    assert outs[0] == outs[1]
    (rec,) = read_jsonl(tmp_path / "a" / "report.jsonl")
    assert rec["repeats"] == 1 and 0 <= rec["mean_accuracy"] <= 1


def test_validate_baseline_needs_no_checkpoint(workdir, tmp_path):
    assert main(["validate", "--corpus", str(workdir / "corpus"), "--metric", "baseline",
                 "--out", str(tmp_path / "v"), "--repeats", "3"]) == 0


def test_ced_both_directions(workdir, tmp_path):
    assert main(["ced", "--checkpoint", str(workdir / "run" / "best.ckpt"), "--corpus", str(workdir / "corpus"),
                 "--out", str(tmp_path / "c"), "--direction", "both"]) == 0
    sessions = [r for r in read_jsonl(tmp_path / "c" / "ced.jsonl") if r["type"] == "session"]
    assert len(sessions) == 2 * 8


def test_ced_bad_direction(workdir, tmp_path):
    code = main(["ced", "--corpus", str(workdir / "corpus"), "--baseline", "--out", str(tmp_path / "c"),
                 "--direction", "A->C"])
    assert code == 3
    assert not (tmp_path / "c").exists()


def test_groups_row_count(workdir, tmp_path):
    assert main(["groups", "--corpus", str(workdir / "corpus"), "--baseline", "--out", str(tmp_path / "g")]) == 0
    rows = read_jsonl(tmp_path / "g" / "groups.jsonl")
    assert 1 <= len(rows) <= 12
    assert sum(r["n"] for r in rows) == 16


def test_correlate_from_ced_records(workdir, tmp_path):
    assert main(["ced", "--corpus", str(workdir / "corpus"), "--baseline", "--out", str(tmp_path / "c")]) == 0
    ced = tmp_path / "c" / "ced.jsonl"
    assert main(["correlate", "--ced", str(ced), "--metadata", str(workdir / "corpus" / "metadata.json"),
                 "--score", "random_score", "--out", str(tmp_path / "r")]) == 0
    rows = read_jsonl(tmp_path / "r" / "correlation.jsonl")
    assert {r["direction"] for r in rows} == {"A->B", "B->A"}
    assert all(-1 <= r["rho"] <= 1 and 0 <= r["p_value"] <= 1 for r in rows)


def test_correlate_requires_score(workdir, tmp_path):
    assert main(["correlate", "--corpus", str(workdir / "corpus"), "--baseline", "--out", str(tmp_path / "r")]) == 2


def test_attention_export(workdir, tmp_path):
    assert main(["attention", "--checkpoint", str(workdir / "run" / "best.ckpt"), "--corpus", str(workdir / "corpus"),
                 "--out", str(tmp_path / "a"), "--pair-index", "1"]) == 0
    assert len(list((tmp_path / "a").glob("*.npy"))) == 2
    assert len(list((tmp_path / "a").glob("*.png"))) == 2
    assert main(["attention", "--checkpoint", str(workdir / "run" / "best.ckpt"), "--corpus", str(workdir / "corpus"),
                 "--out", str(tmp_path / "b"), "--pair-index", "99"]) == 3


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ced.cli", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("synth", "train", "validate", "ced", "correlate", "groups", "attention"):
        assert cmd in out.stdout
