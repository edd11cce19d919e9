import json

import pytest

from scenegcn.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--scenes", "12", "--seed", "1", "--out", str(data), "--relation-samples", "3"]) == 0
    cfg = {"d": 8, "d_q": 8, "mlp_hidden": 16, "batch_size": 16, "epochs": 1, "data_dir": str(data),
           "out_dir": str(root / "runs"), "rel_epochs": 1, "rel_conv_channels": 4, "rel_gru_hidden": 8}
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def test_gen_data_writes_a_dataset(workspace, capsys):
    data = workspace / "data"
    assert (data / "meta.json").exists() and (data / "questions.jsonl").exists()
    assert (data / "relations").exists()


def test_train_rel(workspace, capsys):
    cfg = json.loads((workspace / "cfg.json").read_text())
    cfg["rel_data_dir"] = str(workspace / "data" / "relations")
    (workspace / "rel.json").write_text(json.dumps(cfg))
    assert main(["train-rel", "--config", str(workspace / "rel.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["recall_at_1"] <= 1.0
    assert (workspace / "runs" / "relation_encoder.ckpt").exists()


def test_train_eval_and_dump(workspace, capsys):
    assert main(["train-vqa", "--config", str(workspace / "cfg.json"), "--variant", "implicit"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["variant"] == "implicit" and len(summary["reports"]) == 1
    run = workspace / "runs" / "implicit" / "seed_0"
    ckpt = run / "epoch_001.ckpt"
    assert ckpt.exists() and (run / "report.json").exists()

    assert main(["eval", "--ckpt", str(ckpt)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["overall"] == summary["reports"][0]["overall"]

    qid = json.loads((workspace / "data" / "questions.jsonl").read_text().splitlines()[-1])["qid"]
    out = workspace / "trace.json"
    assert main(["dump-attention", "--ckpt", str(ckpt), "--example", str(qid), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["qid"] == qid


def test_config_error_exit_code(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"variant": "nope"}))
    assert main(["train-vqa", "--config", str(bad)]) == 2
    assert main(["gen-data", "--scenes", "2", "--objects-min", "1", "--out", str(tmp_path / "x")]) == 2


def test_data_error_exit_code(workspace, tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt")]) == 3
    (tmp_path / "junk.ckpt").write_bytes(b"SGCK\x01")
    assert main(["eval", "--ckpt", str(tmp_path / "junk.ckpt")]) == 3


def test_numeric_failure_exit_code(capsys):
    assert main(["grad-check", "--scope", "op", "--tol", "1e-30"]) == 4
    assert main(["grad-check", "--scope", "op"]) == 0
    assert "PASS" in capsys.readouterr().out.upper()


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
