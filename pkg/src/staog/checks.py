"""Acceptance checks shared by the test suite and ``staog oracle-suite``.

Every check returns a :class:`Check`; ``detail`` holds the measured
quantities and never timing, so reports are reproducible byte for byte.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .data import (background_scenario, eval_part_localization, eval_status, fluent_scenario,
                   mean_rate, static_scenario, synth_generate)
from .fluents import (Codebook, classify, confusion_and_mp, train_codebook, train_fluent,
                      video_locals, vlad_encode, vlad_raw)
from .graph import ParseGraph, joint_feature, pack_weights, score_graph
from .inference.detect import DetectConfig, FrameDescription, PartState, pair_window
from .inference.dt import distance_transform
from .learning import (NegativeCache, TrainConfig, frame_loss, init_templates, make_sample,
                       predict_frames, train)
from .tracking import Proposal, path_score, viterbi_link

BENCH_PARTS = ("lf_door", "hood", "lh_light", "rh_light")
BENCH_FLUENTS = ("open_lf_door", "close_lf_door", "open_hood", "close_hood",
                 "turn_left", "turn_right")


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0
    budget: float | None = None

    @property
    def in_time(self) -> bool:
        return self.budget is None or self.seconds < self.budget

    @property
    def ok(self) -> bool:
        return self.passed and self.in_time

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        budget = f" (budget {self.budget:g}s)" if self.budget is not None else ""
        return f"[{tag}] {self.name}: {info}; {self.seconds:.1f}s{budget}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _timed(fn):
    def run(*a, **kw):
        t = time.perf_counter()
        chk = fn(*a, **kw)
        chk.seconds = time.perf_counter() - t
        return chk
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# ------------------------------------------------------------------ oracles


@_timed
def check_dt(seed: int = 0, n: int = 200, max_size: int = 32) -> Check:
    """Distance transform vs the O(n^2) max-convolution."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        H, W = (int(v) for v in rng.integers(1, max_size + 1, 2))
        grid = oracles.dyadic(rng, (H, W))
        grid[rng.random((H, W)) < 0.1] = -np.inf
        w = np.array([rng.integers(-8, 9) / 8, rng.integers(1, 17) / 8,
                      rng.integers(-8, 9) / 8, rng.integers(1, 17) / 8])
        vals, arg = distance_transform(grid, w)
        ref = oracles.brute_force_dt(grid, w)
        ok = np.array_equal(vals, ref)
        yy, xx = np.mgrid[0:H, 0:W]
        fin = np.isfinite(ref)
        sx, sy = arg[..., 0][fin], arg[..., 1][fin]
        dx, dy = xx[fin] - sx, yy[fin] - sy
        got = grid[sy, sx] - (w[0] * dx + w[1] * dx * dx + w[2] * dy + w[3] * dy * dy)
        ok = ok and np.array_equal(got, ref[fin])
        bad += not ok
    return Check("dt_oracle", bad == 0, {"maps": n, "mismatches": bad}, budget=5.0)


@_timed
def check_tree_inference(seed: int = 0, n: int = 100, max_size: int = 8) -> Check:
    """Top pair score without temporal links vs exhaustive parse enumeration."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        W, H = (int(v) for v in rng.integers(4, max_size + 1, 2))
        g = oracles.random_graph(rng, channels=2, branches=2, max_parts=2, max_status=2)
        f0 = oracles.random_pyramid(rng, W, H, 2, levels=2)
        f1 = oracles.random_pyramid(rng, W, H, 2, levels=2)
        wm = pair_window(g, f0, f1, None, DetectConfig())
        bad += wm.best()[0] != oracles.enumerate_pair_best(g, f0, f1)
    return Check("tree_inference_oracle", bad == 0, {"instances": n, "mismatches": bad},
                 budget=30.0)


@_timed
def check_lbp(seed: int = 0, n: int = 200, size: int = 6, rel: float = 0.01,
              need: float = 0.95) -> Check:
    """Loop r - p - p~ - r~ vs the exhaustive joint optimum."""
    rng = np.random.default_rng(seed)
    within = exact = 0
    for _ in range(n):
        g = oracles.random_graph(rng, channels=2, branches=1, max_parts=1, max_status=2,
                                 allow_scale=False, linked=True)
        f0 = oracles.random_pyramid(rng, size, size, 2, levels=1)
        f1 = oracles.random_pyramid(rng, size, size, 2, levels=1)
        fl = oracles.random_flow(rng, f0, 1)
        got = pair_window(g, f0, f1, fl, DetectConfig()).best()[0]
        ref, _ = oracles.exhaustive_pair_best(g, f0, f1, fl)
        within += abs(got - ref) <= rel * abs(ref)
        exact += got == ref
    frac = within / n
    return Check("lbp_oracle", frac >= need,
                 {"instances": n, "within_1pct": frac, "exact_match": exact / n}, budget=60.0)


@_timed
def check_viterbi(seed: int = 0, n: int = 500, max_frames: int = 6, max_props: int = 4) -> Check:
    """Viterbi track vs enumeration of every one-proposal-per-frame path."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        N = int(rng.integers(1, max_frames + 1))
        props = []
        for f in range(N):
            K = int(rng.integers(1, max_props + 1))
            fr = []
            for _ in range(K):
                x, y = rng.uniform(0, 40, 2)
                w, h = rng.uniform(4, 16, 2)
                fr.append(Proposal(f, (x, y, w, h), "close", float(rng.normal()), "p"))
            props.append(fr)
        theta = np.array([rng.normal(), rng.uniform(0, 2), rng.normal(), rng.uniform(0, 2),
                          rng.normal(), rng.uniform(0, 2)])
        lam = float(rng.uniform(0, 2))
        tr = viterbi_link(props, theta, lam, "p")
        ref, _ = oracles.enumerate_paths(props, lambda p: path_score(p, theta, lam))
        got = path_score(tr.proposals, theta, lam)
        bad += not (got == ref and abs(tr.total_score - ref) <= 1e-9 * max(1.0, abs(ref)))
    return Check("viterbi_oracle", bad == 0, {"instances": n, "mismatches": bad}, budget=10.0)


@_timed
def check_score_feature(seed: int = 0, n: int = 100, rtol: float = 1e-9) -> Check:
    """<Theta, Phi(X, pg)> vs recursive scoring on random parse graphs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        g = oracles.random_graph(rng, channels=2, branches=2, max_parts=2, max_status=3,
                                 linked=bool(rng.integers(0, 2)))
        T = int(rng.integers(2, 6))
        W, H = (int(v) for v in rng.integers(6, 11, 2))
        feats = [oracles.random_pyramid(rng, W, H, 2, levels=2) for _ in range(T)]
        # random real-valued features as well, not only dyadic ones
        for p in feats:
            p.levels[:] = [lv + rng.normal(0, 0.1, lv.shape) for lv in p.levels]
        flows = [oracles.random_flow(rng, feats[i], 1) for i in range(T - 1)] + [None]
        pairs = sorted(rng.choice(T - 1, size=int(rng.integers(1, T)), replace=False).tolist())
        pg = ParseGraph([oracles.random_parse_tree(rng, g, (feats[i], feats[i + 1]), i) for i in pairs])
        dot = float(pack_weights(g) @ joint_feature(g, pg, feats, flows))
        ref = score_graph(g, pg, feats, flows)
        worst = max(worst, abs(dot - ref) / max(1.0, abs(ref)))
    return Check("score_feature_duality", worst <= rtol, {"graphs": n, "max_rel_err": worst})


def _desc(view=0, parts=None):
    parts = parts or {"lf_door": ((20, 20, 12, 12), "close"), "hood": ((8, 8, 12, 16), "close")}
    return FrameDescription((0, 0, 64, 32), view, 0,
                            {k: PartState(k, b, s, 0.0) for k, (b, s) in parts.items()})


@_timed
def check_frame_loss() -> Check:
    base = {"lf_door": ((0, 0, 10, 10), "close"), "hood": ((20, 0, 10, 10), "close")}
    shifted = dict(base, lf_door=((0, 0, 4, 10), "close"))  # IoU 0.4
    flipped = dict(base, lf_door=((0, 0, 10, 10), "open"))
    cases = {
        "identical": (frame_loss(_desc(0, base), _desc(0, base), 0.5), 0),
        "view": (frame_loss(_desc(0, base), _desc(1, base), 0.5), 1),
        "overlap_0.4": (frame_loss(_desc(0, base), _desc(0, shifted), 0.5), 1),
        "status": (frame_loss(_desc(0, base), _desc(0, flipped), 0.5), 1),
    }
    ok = all(got == want for got, want in cases.values())
    return Check("frame_loss_cases", ok, {k: v[0] for k, v in cases.items()})


@_timed
def check_vlad(seed: int = 0, n: int = 100) -> Check:
    rng = np.random.default_rng(seed)
    raw_bad, worst = 0, 0.0
    for _ in range(n):
        k, d = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        X = rng.normal(size=(int(rng.integers(1, 30)), d))
        C = rng.normal(size=(k, d))
        cb = Codebook(C)
        raw_bad += not np.array_equal(vlad_raw(X, cb), oracles.naive_vlad_raw(X, C))
        worst = max(worst, float(np.max(np.abs(vlad_encode(X, cb) - oracles.naive_vlad(X, C)))))
    return Check("vlad_oracle", raw_bad == 0 and worst <= 1e-12,
                 {"cases": n, "raw_mismatches": raw_bad, "max_abs_err": worst})


ORACLE_CHECKS = (check_dt, check_tree_inference, check_lbp, check_viterbi,
                 check_score_feature, check_frame_loss, check_vlad)


def oracle_suite(seed: int = 7) -> list[Check]:
    out = []
    for fn in ORACLE_CHECKS:
        out.append(fn() if fn is check_frame_loss else fn(seed))
    return out


# ----------------------------------------------------------------- training


def _samples(scenarios, stride=3):
    out = []
    for sc in scenarios:
        fr, ann = synth_generate(sc)
        out.append(make_sample(fr, ann, stride=stride, video_id=sc.video_id))
    return out


@_timed
def check_cccp(seed: int = 0, runs: int = 10, outer: int = 5, tol: float = 1e-6) -> Check:
    """Surrogate objective after each outer iteration with a frozen working set."""
    parts = ("hood", "lh_light")
    worst, moved = -np.inf, 0
    for r in range(runs):
        s0 = seed + 100 * r
        pos = _samples([static_scenario(s0 + i, parts=parts, n_frames=5) for i in range(2)])
        neg = _samples([background_scenario(s0, n_frames=5)])
        g = init_templates(pos, list(parts))
        cache = NegativeCache(500)
        g, _ = train(g, pos, TrainConfig(outer=1, inner=1, seed=s0), neg, cache=cache)
        cfg = TrainConfig(outer=outer, seed=s0, freeze_cache_after=0)
        _, rows = train(g, pos, cfg, neg, cache=cache)
        objs = [row[1] for row in rows]
        if len(objs) > 1:
            worst = max(worst, float(np.max(np.diff(objs))))
            moved += objs[-1] < objs[0] - tol
    return Check("cccp_monotonicity", worst <= tol,
                 {"runs": runs, "max_increase": worst, "runs_decreasing": moved})


def train_benchmark_model(seed: int = 100, n_train: int = 6, n_neg: int = 2,
                          outer: int = 2, inner: int = 6, parts=BENCH_PARTS):
    pos = _samples([static_scenario(seed + i, parts=parts) for i in range(n_train)])
    neg = _samples([background_scenario(seed + i) for i in range(n_neg)])
    g = init_templates(pos, list(parts))
    g, rows = train(g, pos, TrainConfig(outer=outer, inner=inner), neg)
    return g, rows


@_timed
def check_separable_training(seed: int = 100, n_train: int = 6, n_test: int = 10,
                             model_out: list | None = None) -> Check:
    """Train on static synthetic cars, evaluate parts on held-out videos."""
    g, rows = train_benchmark_model(seed, n_train)
    test = _samples([static_scenario(50000 + seed + i, parts=BENCH_PARTS) for i in range(n_test)])
    preds = [predict_frames(g, s) for s in test]
    anns = [s.annotation for s in test]
    loc = mean_rate(eval_part_localization(preds, anns, 0.5, BENCH_PARTS))
    st = mean_rate(eval_status(preds, anns, 0.5, BENCH_PARTS))
    if model_out is not None:
        model_out.append(g)
    return Check("separable_training", loc >= 0.95 and st >= 0.90,
                 {"localization": loc, "status": st, "outer_iters": len(rows)}, budget=600.0)


@_timed
def check_fluent_benchmark(g=None, seed: int = 0, n_train: int = 20, n_test: int = 10,
                           k: int = 8, pca: float = 0.5) -> Check:
    """Detect, track, describe, encode and classify six synthetic fluents."""
    if g is None:
        g, _ = train_benchmark_model()
    loc = {"train": [], "test": []}
    for split, n, off in (("train", n_train, seed), ("test", n_test, seed + 10000)):
        for c in BENCH_FLUENTS:
            for s in range(n):
                fr, _ = synth_generate(fluent_scenario(c, off + s, parts=BENCH_PARTS))
                loc[split].append((video_locals(g, fr, BENCH_PARTS)[0], c))
    cb = train_codebook(np.vstack([x for x, _ in loc["train"]]), k, pca, seed=7)
    model = train_fluent([vlad_encode(x, cb) for x, _ in loc["train"]],
                         [c for _, c in loc["train"]], classes=BENCH_FLUENTS)
    pred = [model.labels.index(classify(model, vlad_encode(x, cb))[0]) for x, _ in loc["test"]]
    truth = [model.labels.index(c) for _, c in loc["test"]]
    _, mp = confusion_and_mp(pred, truth, len(model.labels))
    return Check("fluent_benchmark", mp >= 0.90, {"MP": mp, "test_videos": len(truth)},
                 budget=900.0)
