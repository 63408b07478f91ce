from __future__ import annotations

import json
import subprocess
import sys

import pytest

from dynmap.harness.checks import tiny_config
from dynmap.harness.cli import SCHEMAS, main

TINY = tiny_config(image_size=64).to_dict()


def test_ten_subcommands():
    assert sorted(SCHEMAS) == sorted(["gen-expert", "gen-dataset", "train-wm", "train-policy",
                                      "train-joint", "train-e2e", "eval", "replay", "gradcheck",
                                      "validate-dataset"])


def test_eval_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "dynmap.harness.cli", "eval", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "--checkpoints" in r.stdout


def test_unknown_flag_exits_one(capsys):
    assert main(["eval", "--bogus", "1"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_dataset_names_field(tmp_path, capsys):
    assert main(["train-wm", "--out", str(tmp_path)]) == 1
    assert "dataset" in capsys.readouterr().err
    assert main(["train-wm", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
    assert "dataset:" in capsys.readouterr().err


def test_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["gradcheck", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"seed": 0, "learning_rate": 1}))
    assert main(["gradcheck", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_bad_task_rejected(tmp_path, capsys):
    assert main(["gen-dataset", "--task", "Juggling", "--out", str(tmp_path)]) == 1
    assert "task" in capsys.readouterr().err


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep and all(v["max_error"] < v["tolerance"] for v in rep.values())
    assert (tmp_path / "stamp_gradcheck.json").exists()


def test_pipeline_smoke(tmp_path, capsys):
    ds, wm, pol, rep = (tmp_path / d for d in ("ds", "wm", "pol", "rep"))
    assert main(["gen-dataset", "--task", "BalanceReaching", "--out", str(ds), "--n-train", "20",
                 "--n-eval", "3", "--randomization", "reduced", "--seed", "1"]) == 0
    assert main(["validate-dataset", "--dataset", str(ds), "--stamp", str(tmp_path / "v.json")]) == 0
    assert main(["replay", "--dataset", str(ds), "--out", str(rep)]) == 0
    cfg = tmp_path / "model.json"
    cfg.write_text(json.dumps({"model": TINY, "epochs": 1, "weights": "pv"}))
    assert main(["train-wm", "--config", str(cfg), "--dataset", str(ds), "--out", str(wm)]) == 0
    pcfg = tmp_path / "policy.json"
    pcfg.write_text(json.dumps({"model": TINY, "epochs": 2, "seeds": [0, 1]}))
    assert main(["train-policy", "--config", str(pcfg), "--dataset", str(ds), "--out", str(pol),
                 "--wm", str(wm / "worldmodel.dmnn")]) == 0
    cks = json.dumps([str(pol / "policy_seed0.dmnn"), str(pol / "policy_seed1.dmnn")])
    assert main(["eval", "--dataset", str(ds), "--checkpoints", cks, "--episodes", "3",
                 "--out", str(rep)]) == 0
    out = capsys.readouterr().out
    assert "SR" in out and "held-out L_pi" in out
    assert {"episodes.csv", "summary.csv", "stamp_eval.json"} <= {p.name for p in rep.iterdir()}
    stamp = json.loads((rep / "stamp_eval.json").read_text())
    assert stamp["exit"] == 0 and str(ds) in stamp["inputs"]
