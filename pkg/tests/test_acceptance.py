"""Acceptance criteria at full size. One summary line per criterion is
printed at the end of the session."""
import time

import pytest

from staog.checks import (check_cccp, check_dt, check_fluent_benchmark, check_frame_loss,
                          check_lbp, check_score_feature, check_separable_training,
                          check_tree_inference, check_vlad, check_viterbi)
from staog.cli import run

from conftest import ACCEPTANCE_LINES


def report(num, chk):
    line = f"criterion {num:2d} {chk.line()}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return chk


def test_01_distance_transform():
    c = report(1, check_dt(seed=0, n=200, max_size=32))
    assert c.ok, c.line()


def test_02_tree_inference():
    c = report(2, check_tree_inference(seed=0, n=100, max_size=8))
    assert c.ok, c.line()


def test_03_loopy_bp():
    c = report(3, check_lbp(seed=0, n=200, size=6))
    assert c.ok, c.line()


def test_04_viterbi():
    c = report(4, check_viterbi(seed=0, n=500, max_frames=6, max_props=4))
    assert c.ok, c.line()


def test_05_score_feature_duality():
    c = report(5, check_score_feature(seed=0, n=100, rtol=1e-9))
    assert c.ok, c.line()


def test_06_frame_loss():
    c = report(6, check_frame_loss())
    assert c.ok, c.line()


def test_07_cccp_monotone():
    c = report(7, check_cccp(seed=0, runs=10, outer=5, tol=1e-6))
    assert c.ok, c.line()


@pytest.fixture(scope="module")
def trained():
    models = []
    chk = check_separable_training(seed=100, n_train=6, n_test=10, model_out=models)
    return chk, models[0]


def test_08_separable_training(trained):
    c = report(8, trained[0])
    assert c.ok, c.line()


def test_09_fluent_benchmark(trained):
    train_chk, g = trained
    c = check_fluent_benchmark(g, seed=0, n_train=20, n_test=10)
    c.seconds += train_chk.seconds  # the detector training counts against the budget
    c.detail["includes_training_s"] = round(train_chk.seconds, 1)
    report(9, c)
    assert c.ok, c.line()


def test_10_workers_byte_identical(tmp_path):
    from staog.checks import Check
    t = time.perf_counter()
    d = tmp_path
    data = d / "data"
    assert run(["synth", "--out", data, "--static-train", 3, "--static-test", 1,
                "--background", 1, "--fluent-train", 2, "--fluent-test", 1,
                "--labels", "open_hood,close_hood,turn_left"]) == 0
    video = sorted((data / "videos").iterdir())[0]
    outs = {}
    for w in (1, 2):
        m = d / f"aog{w}.json"
        assert run(["train-aog", "--data", data, "--out", m, "--outer", 1, "--inner", 2,
                    "--workers", w]) == 0
        assert run(["detect", "--model", m, "--video", video, "--out", d / f"det{w}.jsonl",
                    "--workers", w]) == 0
        assert run(["track", "--detections", d / f"det{w}.jsonl", "--out", d / f"trk{w}.jsonl",
                    "--workers", w]) == 0
        assert run(["train-fluent", "--data", data, "--model", m, "--out", d / f"fl{w}.json",
                    "--k", 4, "--workers", w]) == 0
        outs[w] = [(d / n).read_bytes() for n in
                   (f"aog{w}.json", f"aog{w}.iterations.csv", f"det{w}.jsonl", f"trk{w}.jsonl",
                    f"fl{w}.json")]
    same = [a == b for a, b in zip(outs[1], outs[2])]
    c = Check("workers_identical", all(same),
              {"outputs": len(same), "identical": sum(same)})
    c.seconds = time.perf_counter() - t
    report(10, c)
    assert c.ok, c.line()


def test_11_vlad():
    c = report(11, check_vlad(seed=0, n=100))
    assert c.ok, c.line()
