import json
import os

from pixpoint import cli, pipeline
from pixpoint.pipeline import Divergence


def test_schema_lists_every_default(capsys):
    assert cli.main(["schema"]) == 0
    doc = json.loads(capsys.readouterr().out)
    loss = doc["properties"]["loss"]["properties"]
    assert loss["m"]["default"] == 0.2 and loss["zeta"]["default"] == 10.0
    assert doc["properties"]["train"]["properties"]["lambda"]["default"] == 1.0


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nope": 1}}))
    assert cli.main(["train", "x", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"loss": {"kind": "hinge"}}))
    assert cli.main(["train", "x", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    bad.write_text("{not json")
    assert cli.main(["train", "x", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    assert cli.main(["train", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    empty = tmp_path / "t.csv"
    empty.write_text("step,epoch,loss_desc,loss_det,mean_dp,mean_dn_star\n")
    assert cli.main(["trace", str(empty), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise Divergence(7)
    monkeypatch.setattr(pipeline, "train", boom)
    assert cli.main(["train", "x", "--out", str(tmp_path / "o")]) == cli.EXIT_DIVERGED


def test_threads_flag_sets_environment(tmp_path, monkeypatch):
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli.main(["trace", str(tmp_path / "none.csv"), "--threads", "3", "--out", str(tmp_path)])
    assert all(os.environ[v] == "3" for v in cli._THREAD_VARS)


def test_end_to_end(tiny_dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 2}}))
    run, ev = tmp_path / "run", tmp_path / "ev"
    assert cli.main(["train", str(tiny_dataset), "--config", str(cfg), "--out", str(run)]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 2 and len(manifest["per_epoch"]) == 2
    assert len(manifest["input_hash"]) == 64
    assert cli.main(["eval", str(tiny_dataset), str(run / "checkpoint.pt"), "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert set(metrics) >= {"FMR", "IR_mean", "KR_mean", "Recall_mean", "RegRecall", "n_pairs"}
    assert cli.main(["trace", str(run / "trace.csv"), "--out", str(tmp_path / "tr")]) == 0
    lines = (tmp_path / "tr" / "trace_plot.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,last_step,mean_dp,mean_dn_star") and len(lines) == 3


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--n-scenes", "2", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
