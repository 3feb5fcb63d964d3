import json
import subprocess
import sys

import pytest

from staog.cli import COMMANDS, parse, run


def staog(*args):
    return subprocess.run([sys.executable, "-m", "staog", *map(str, args)],
                          capture_output=True, text=True)


def test_help_lists_every_subcommand():
    r = staog("--help")
    assert r.returncode == 0
    for c in COMMANDS:
        assert c in r.stdout
    assert len(COMMANDS) == 8


def test_unknown_flag_is_usage_error():
    r = staog("synth", "--out", "x", "--bogus")
    assert r.returncode == 1 and "bogus" in r.stderr


def test_zero_workers_rejected(tmp_path):
    assert run(["synth", "--out", tmp_path / "d", "--workers", "0"]) == 1


def test_missing_input_is_exit_one(tmp_path):
    assert run(["detect", "--model", tmp_path / "none.json", "--video", tmp_path,
                "--out", tmp_path / "d.jsonl"]) == 1


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nc = 3.5\nouter = 4\n")
    a = parse(["train-aog", "--data", "d", "--out", "o", "--config", str(cfg)])
    assert a.c == 3.5 and a.outer == 4
    b = parse(["train-aog", "--data", "d", "--out", "o", "--config", str(cfg), "--outer", "1"])
    assert b.outer == 1 and b.c == 3.5
    assert parse(["train-aog", "--data", "d", "--out", "o"]).outer == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = red\n")
    assert run(["train-aog", "--data", "d", "--out", "o", "--config", cfg]) == 1


def test_oracle_suite_is_reproducible(tmp_path):
    assert run(["oracle-suite", "--out", tmp_path / "a.csv", "--seed", "3"]) == 0
    assert run(["oracle-suite", "--out", tmp_path / "b.csv", "--seed", "3"]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert b"fail" not in a.split(b"\n", 1)[1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    small = ["--parts", "hood", "--labels", "open_hood,close_hood"]
    assert run(["synth", "--out", d / "data", "--static-train", 2, "--static-test", 2,
                "--background", 1, "--fluent-train", 3, "--fluent-test", 2,
                "--static-frames", 4, "--fluent-frames", 16, *small]) == 0
    assert run(["train-aog", "--data", d / "data", "--out", d / "aog.json", "--parts", "hood",
                "--outer", 1, "--inner", 2]) == 0
    return d


def test_pipeline_writes_run_logs(pipeline):
    log = json.loads((pipeline / "aog.json.run.json").read_text())
    assert log["command"] == "train-aog" and "seed" in log["config"]
    assert (pipeline / "aog.iterations.csv").exists()


def test_detect_track_and_high_tau(pipeline):
    d = pipeline
    video = sorted((d / "data" / "videos").iterdir())[0]
    assert run(["detect", "--model", d / "aog.json", "--video", video,
                "--out", d / "det.jsonl"]) == 0
    lines = (d / "det.jsonl").read_text().splitlines()
    assert lines and all(json.loads(l) for l in lines)
    assert run(["detect", "--model", d / "aog.json", "--video", video, "--tau", 999,
                "--out", d / "none.jsonl"]) == 0
    assert (d / "none.jsonl").read_text() == ""
    assert run(["track", "--detections", d / "det.jsonl", "--out", d / "tracks.jsonl",
                "--parts", "hood"]) == 0
    assert (d / "tracks.jsonl").read_text().strip()


def test_fluent_train_and_eval(pipeline):
    d = pipeline
    assert run(["train-fluent", "--data", d / "data", "--model", d / "aog.json",
                "--out", d / "fl.json", "--k", 2]) == 0
    assert run(["eval-fluent", "--data", d / "data", "--model", d / "aog.json",
                "--fluent", d / "fl.json", "--out", d / "ev"]) == 0
    m = json.loads((d / "ev" / "metrics.json").read_text())
    assert 0.0 <= m["MP"] <= 1.0
    assert (d / "ev" / "confusion.csv").exists() and (d / "ev" / "predictions.csv").exists()
    assert run(["eval-parts", "--data", d / "data", "--model", d / "aog.json",
                "--out", d / "ep"]) == 0
    assert (d / "ep" / "part_rates.csv").exists()
