"""End-to-end CLI behavior at toy scale: artifacts, exit codes, streams."""

import csv
import os

import numpy as np
import pytest

from m3ad.cli import main
from m3ad.data import load_manifest

_TINY_CFG = """\
# toy-scale network for CLI smoke tests
embed_dim = 8
depths = 1,1,1,1
num_heads = 1,2,4,8
window = 4
expert_hidden_ratio = 2

epochs = 2
batch_size = 8
lr = 0.001
patience = 5
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_data_dir):
    """gen-data artifacts come from the shared fixture; pretrain and
    finetune run once through the real CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(_TINY_CFG)
    out = root / "run"
    rc_pre = main(["pretrain", "--config", str(cfg), "--data", str(tiny_data_dir),
                   "--out", str(out), "--seed", "5"])
    rc_ft = main(["finetune", "--config", str(cfg), "--data", str(tiny_data_dir),
                  "--out", str(out), "--seed", "5",
                  "--init", str(out / "pretrain.m3ck")])
    return {"root": root, "cfg": cfg, "out": out, "manifest": tiny_data_dir,
            "rc_pre": rc_pre, "rc_ft": rc_ft}


def test_gen_data_writes_manifest_and_images(tmp_path):
    out = tmp_path / "data"
    rc = main(["gen-data", "--out", str(out), "--seed", "3",
               "--set", "n=6", "--set", "size=32", "--set", "fractions=1,0,0"])
    assert rc == 0
    records = load_manifest(out / "manifest.csv")
    assert len(records) == 6
    assert all(os.path.isfile(out / r.path) for r in records)


def test_gen_data_seed_changes_content(tmp_path):
    args = ["gen-data", "--set", "n=4", "--set", "size=32", "--set", "fractions=1,0,0"]
    assert main(args + ["--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--seed", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "c"), "--seed", "2"]) == 0
    a = (tmp_path / "a" / "manifest.csv").read_text()
    assert a == (tmp_path / "b" / "manifest.csv").read_text()
    assert a != (tmp_path / "c" / "manifest.csv").read_text()


def test_pretrain_artifacts(pipeline):
    assert pipeline["rc_pre"] == 0
    out = pipeline["out"]
    assert (out / "pretrain.m3ck").is_file()
    with open(out / "pretrain_log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "lr", "train_total", "train_recon",
                       "train_expert", "val_masked_l1"]
    assert len(rows) == 3  # header + 2 epochs
    for row in rows[1:]:
        assert float(row[-1]) > 0.0  # values parse back


def test_finetune_artifacts(pipeline):
    assert pipeline["rc_ft"] == 0
    out = pipeline["out"]
    assert (out / "finetune.m3ck").is_file()
    with open(out / "finetune_log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "lr", "train_loss", "val_diag_acc",
                       "val_change_acc", "val_mean_acc"]
    for row in rows[1:]:
        assert 0.0 <= float(row[3]) <= 1.0


def test_eval_writes_metric_csvs(pipeline, tmp_path):
    out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(pipeline["out"] / "finetune.m3ck"),
               "--data", str(pipeline["manifest"]), "--out", str(out),
               "--split", "val"])
    assert rc == 0
    for name in ("metrics_diagnosis.csv", "metrics_change.csv",
                 "confusion_diagnosis.csv", "confusion_change.csv"):
        assert (out / name).is_file()
    with open(out / "confusion_diagnosis.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["true", "NC", "MCI", "AD"]
    total = sum(int(v) for row in rows[1:] for v in row[1:])
    assert total == 4  # val split of the tiny fixture
    with open(out / "metrics_change.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "class", "value"]
    classes = {row[1] for row in rows[1:] if row[1]}
    assert classes == {"Stable", "Conversion", "Reversion"}


def test_eval_rejects_pretrain_checkpoint(pipeline, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["out"] / "pretrain.m3ck"),
               "--data", str(pipeline["manifest"]), "--out", str(tmp_path)])
    assert rc == 1
    assert "prior statistics" in capsys.readouterr().err


def test_inspect_gates_csv(pipeline, tmp_path):
    out = tmp_path / "gates"
    rc = main(["inspect-gates", "--checkpoint", str(pipeline["out"] / "finetune.m3ck"),
               "--data", str(pipeline["manifest"]), "--out", str(out),
               "--split", "val"])
    assert rc == 0
    with open(out / "gates.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "task"] + [f"expert{e}" for e in range(8)]
    assert len(rows) == 1 + 4 * 2  # 4 layers x 2 tasks
    for row in rows[1:]:
        weights = np.array([float(v) for v in row[2:]])
        assert weights.min() >= 0.0
        assert abs(weights.sum() - 1.0) < 1e-6
    assert {row[1] for row in rows[1:]} == {"diagnosis", "change"}


def test_exit_codes_for_bad_invocations(tmp_path, capsys):
    assert main([]) == 1  # no subcommand: help to stderr

    rc = main(["gen-data", "--out", str(tmp_path / "x"), "--set", "bogus=1"])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err

    rc = main(["pretrain", "--data", str(tmp_path / "none.csv")])
    assert rc == 1  # --out missing
    assert "--out" in capsys.readouterr().err

    rc = main(["pretrain", "--data", str(tmp_path / "none.csv"),
               "--out", str(tmp_path / "o")])
    assert rc == 1  # manifest does not exist

    rc = main(["eval", "--checkpoint", str(tmp_path / "none.m3ck"),
               "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")])
    assert rc == 1


def test_bad_config_value_names_the_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = 0.001\nepochs = soon\n")
    rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "bad.cfg:2" in err
    assert "epochs" in err
