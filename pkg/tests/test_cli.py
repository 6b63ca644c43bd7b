import json

import numpy as np
import pytest

from p2s_attack import cli
from p2s_attack.data_io import read_jsonl, read_report
from p2s_attack.victim import VictimModel


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small dataset plus a trained victim, built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--per-class", "8", "--points", "128", "--seed", "2"]) == 0
    manifest = root / "data" / "manifest.json"
    code = cli.main(
        ["train-victim", "--manifest", str(manifest), "--out", str(root / "m.p2sw"), "--epochs", "25", "--lr", "3e-4"]
    )
    assert code == 0
    return root, manifest, root / "m.p2sw"


def test_gen_data_repeatable_hash(tmp_path, capsys):
    code, out1, _ = run(["gen-data", "--out", tmp_path / "a", "--per-class", "3", "--points", "32"], capsys)
    assert code == 0
    _, out2, _ = run(["gen-data", "--out", tmp_path / "b", "--per-class", "3", "--points", "32"], capsys)
    assert json.loads(out1)["sha256"] == json.loads(out2)["sha256"]
    assert len(list((tmp_path / "a" / "clouds").glob("*.xyz"))) == 15


def test_gen_data_bad_class_count(tmp_path, capsys):
    code, _, err = run(["gen-data", "--out", tmp_path, "--classes", "1"], capsys)
    assert code == 2
    assert json.loads(err)["exit_code"] == 2


def test_usage_errors(capsys):
    assert run(["attack"], capsys)[0] == 2
    assert run(["frobnicate"], capsys)[0] == 2
    assert run(["gen-data", "--out", "x", "--alpha", "1"], capsys)[0] == 2


def test_train_victim_outputs(workspace):
    root, _, model_path = workspace
    model = VictimModel.load(model_path)
    assert model.num_classes == 5
    log = read_jsonl(str(model_path) + ".log.jsonl")
    assert len(log) == 25
    losses = [r["loss"] for r in log]
    assert losses[-1] < losses[0]


def test_train_victim_non_finite_exit_code(workspace, tmp_path, capsys):
    _, manifest, _ = workspace
    code, _, err = run(["train-victim", "--manifest", manifest, "--out", tmp_path / "m", "--lr", "1e300"], capsys)
    assert code == 4
    assert json.loads(err)["error"] == "NonFiniteLoss"


def test_attack_eval_pipeline(workspace, tmp_path, capsys):
    root, manifest, model = workspace
    base = ["attack", "--manifest", manifest, "--model", model, "--out", tmp_path / "runs", "--limit", "5"]
    for sign in ("+", "-", "off"):
        code, out, _ = run(base + ["--p2s", sign, "--iters", "200"], capsys)
        assert code == 0
    logs = [tmp_path / "runs" / f"ifgm{s}.jsonl" for s in ("", "+p2s", "-p2s")]
    assert all(p.exists() for p in logs)
    header = read_jsonl(logs[1])[0]
    assert header["config"]["theta"] == 0.5 and header["config"]["field_sign"] == 1
    assert read_jsonl(logs[2])[0]["config"]["field_sign"] == -1
    assert read_jsonl(logs[0])[0]["config"]["field_sign"] == 0
    outcomes = [r for r in read_jsonl(logs[1]) if r["kind"] == "outcome"]
    assert len(outcomes) == 5
    adv = [p for p in (tmp_path / "runs" / "ifgm+p2s").glob("*.xyz")]
    assert len(adv) == sum(not r["skipped"] for r in outcomes)

    code, _, _ = run(["eval", *logs, "--out", tmp_path / "rep"], capsys)
    assert code == 0
    first = (tmp_path / "rep.csv").read_bytes()
    run(["eval", *logs, "--out", tmp_path / "rep"], capsys)
    assert (tmp_path / "rep.csv").read_bytes() == first
    report = read_report(tmp_path / "rep.json")
    row = report["rows"][1]
    won = [r for r in outcomes if r["success"] and not r["skipped"]]
    attacked = [r for r in outcomes if not r["skipped"]]
    assert row["asr"] == len(won) / len(attacked)
    for key in ("cd", "hd", "l2", "gr", "curv", "emd"):
        assert row[key] == pytest.approx(np.mean([r["metrics"][key] for r in won]), rel=1e-15)


def test_attack_rerun_is_identical(workspace, tmp_path, capsys):
    _, manifest, model = workspace
    argv = ["attack", "--manifest", manifest, "--model", model, "--limit", "3", "--method", "pgd", "--budget", "0.1"]
    run(argv + ["--out", tmp_path / "a"], capsys)
    run(argv + ["--out", tmp_path / "b"], capsys)
    assert (tmp_path / "a" / "pgd+p2s.jsonl").read_bytes() == (tmp_path / "b" / "pgd+p2s.jsonl").read_bytes()


def test_eval_missing_run_log(tmp_path, capsys):
    code, _, err = run(["eval", tmp_path / "none.jsonl", "--out", tmp_path / "r"], capsys)
    assert code == 3
    assert "not found" in json.loads(err)["message"]


def test_missing_manifest_is_data_error(tmp_path, capsys):
    code, _, _ = run(["train-victim", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "m"], capsys)
    assert code == 3


def test_config_file_flags_win(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 0.5, "theta": 0.25, "p2s": "-"}))
    args = cli.parse_args(
        ["attack", "--manifest", "m", "--model", "x", "--out", "o", "--config", str(cfg), "--alpha", "0.02"]
    )
    assert args.alpha == 0.02 and args.theta == 0.25 and args.p2s == "-"


def test_config_file_rejects_unknown_and_bad_values(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gamma": 1}))
    assert run(["gen-data", "--out", tmp_path, "--config", cfg], capsys)[0] == 2
    cfg.write_text(json.dumps({"method": "cw"}))
    argv = ["attack", "--manifest", "m", "--model", "x", "--out", "o", "--config", cfg]
    assert run(argv, capsys)[0] == 2
    cfg.write_text("[1, 2]")
    assert run(argv, capsys)[0] == 2


def test_log_level_from_environment(monkeypatch, tmp_path, capsys):
    import logging

    monkeypatch.setenv("P2S_LOG_LEVEL", "debug")
    root = logging.getLogger()
    old = root.handlers[:]
    root.handlers = []
    try:
        run(["gen-data", "--out", tmp_path, "--per-class", "2", "--points", "16", "--classes", "2"], capsys)
        assert root.level == logging.DEBUG
    finally:
        root.handlers = old
        root.setLevel(logging.WARNING)


def test_ordering_checks_logic():
    from p2s_attack.metrics import MetricsReport

    def rep(cd, hd, asr=1.0):
        return MetricsReport(asr, 10, 10, cd, hd, 0, 0, 0, 0)

    good = {"ifgm": rep(2, 2), "ifgm+p2s": rep(1, 1), "ifgm-p2s": rep(3, 3)}
    assert all(ok for _, ok in cli.ordering_checks(good))
    bad = {"ifgm": rep(2, 2), "ifgm+p2s": rep(1, 3), "ifgm-p2s": rep(3, 3)}
    assert not all(ok for _, ok in cli.ordering_checks(bad))


def test_stop_mode_and_repro_defaults():
    attack = cli.parse_args(["attack", "--manifest", "m", "--model", "x", "--out", "o"])
    assert attack.stop == "success" and attack.iters == 500
    assert cli._attack_config(attack, "ifgm", 1, 3.0).stop_on_success
    repro = cli.parse_args(["repro", "--out", "o"])
    assert repro.stop == "fixed" and repro.iters == cli.REPRO_ITERS
    assert not cli._attack_config(repro, "pgd", 0, 0.3).stop_on_success
    assert cli.parse_args(["repro", "--out", "o", "--stop", "success"]).stop == "success"
