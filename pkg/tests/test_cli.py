import json
import shutil
import subprocess
import sys

import pytest

from recam.cli import main

from helpers import DESK_FLAGS, FIXTURES, file_tree, run_pipeline


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "recam.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("prepare", "rank", "augment", "train", "evaluate", "ablate", "sweep-tokens", "transfer"):
        assert cmd in out.stdout


def test_unknown_flag_is_user_error(capsys):
    assert main(["train", "--bogus"]) == 1


def test_missing_data_dir_names_the_flag(capsys, tmp_path):
    assert main(["train", "--out", str(tmp_path / "ck")]) == 1
    assert "--data-dir" in capsys.readouterr().err


def test_nonexistent_data_dir(capsys, tmp_path):
    assert main(["train", "--data-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "ck")]) == 1
    assert "--data-dir" in capsys.readouterr().err


def test_off_grid_without_unsafe_is_rejected(capsys, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(FIXTURES / "data1", data)
    assert main(["train", "--data-dir", str(data), "--out", str(tmp_path / "ck"), "--lr", "0.3"]) == 1
    assert "unsafe" in capsys.readouterr().err


def test_pipeline_is_byte_identical_across_runs(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run_pipeline(a, monkeypatch)
    run_pipeline(b, monkeypatch)
    ta, tb = file_tree(a / "run"), file_tree(b / "run")
    assert sorted(ta) == sorted(tb)
    differing = [k for k in ta if ta[k] != tb[k]]
    assert differing == []

    ranked = [json.loads(line) for line in (a / "run/train.ranked.jsonl").read_text().splitlines()]
    assert {"article_ranked", "sentence_scores", "sentence_order"} <= set(ranked[0])
    bt = [json.loads(line) for line in (a / "run/train.bt.jsonl").read_text().splitlines()]
    assert all(r["id"].endswith("-bt") for r in bt)
    report = json.loads((a / "run/eval/eval_dev.json").read_text())
    assert report["total"] == 10
    manifest = json.loads((a / "run/ckpt/run_manifest.json").read_text())
    assert manifest["config"]["learning_rate"] == 0.002 and manifest["config"]["siamese"] is True
    assert all(len(h) == 64 for h in manifest["inputs"].values())


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    shutil.copytree(FIXTURES / "data1", tmp_path / "data")
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.yaml").write_text("learning_rate: 0.002\nbatch_size: 4\nepochs: 1\nunsafe: true\nseed: 3\n")
    assert main(["train", "--config", "cfg.yaml", "--data-dir", "data", "--out", "ck", "--batch-size", "2"]) == 0
    cfg = json.loads((tmp_path / "ck/config.json").read_text())
    assert cfg["batch_size"] == 2 and cfg["learning_rate"] == 0.002 and cfg["seed"] == 3


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    (tmp_path / "cfg.yaml").write_text("learning_rat: 0.1\n")
    rc = main(["train", "--config", str(tmp_path / "cfg.yaml"), "--data-dir", str(FIXTURES / "data1"),
               "--out", str(tmp_path / "ck")])
    assert rc == 1
    assert "learning_rat" in capsys.readouterr().err


@pytest.mark.parametrize("cmd,stem,rows", [
    (["ablate", "--ablate", "special_tokens", "siamese"], "ablation", 4),
    (["sweep-tokens", "--schemes", "<e>", "none"], "token_sweep", 2),
])
def test_harness_commands(tmp_path, cmd, stem, rows):
    out = tmp_path / "out"
    assert main([*cmd, "--data-dir", str(FIXTURES / "data1"), "--out", str(out), *DESK_FLAGS, "--epochs", "1"]) == 0
    table = json.loads((out / f"{stem}.json").read_text())
    assert len(table["rows"]) == rows
    assert (out / f"{stem}.txt").exists()


def test_transfer_reports_missing_cells(tmp_path, capsys):
    ck = tmp_path / "ck1"
    assert main(["train", "--data-dir", str(FIXTURES / "data1"), "--out", str(ck), *DESK_FLAGS, "--epochs", "1"]) == 0
    out = tmp_path / "tr"
    assert main(["transfer", "--ckpt1", str(ck), "--data-dir1", str(FIXTURES / "data1"),
                 "--data-dir2", str(FIXTURES / "data2"), "--out", str(out)]) == 0
    matrix = json.loads((out / "transfer.json").read_text())
    assert matrix["complete"] is False
    assert matrix["cells"]["imperceptibility"]["nonspecificity"] is not None
    assert "incomplete" in capsys.readouterr().err
