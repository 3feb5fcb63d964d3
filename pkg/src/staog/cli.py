"""``staog`` command line: synthetic data, AOG training, detection, tracking,
fluent classification and the oracle suite.

Exit codes: 0 success, 1 validation error (bad flags, inputs or config),
2 runtime failure. Flags win over ``--config`` (key = value lines), which
wins over defaults; the resolved configuration goes to a run log next to
``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checks import BENCH_FLUENTS, BENCH_PARTS, oracle_suite
from .data import (AnnotationError, FLUENTS, ManifestEntry, PARTS, background_scenario,
                   eval_part_localization, eval_status, fluent_scenario, load_annotation,
                   load_frames, load_manifest, mean_rate, save_annotation, save_frames,
                   save_manifest, static_scenario, synth_generate)
from .fluents import (classify, confusion_and_mp, link_tracks, load_fluent_model,
                      save_fluent_model, train_codebook, train_fluent, video_locals, vlad_encode)
from .graph import load_model, save_model
from .inference.temporal import LBPConfig
from .inference.detect import DetectConfig, detect, read_proposals, write_detections
from .learning import (TrainConfig, TrainingError, init_templates, make_sample, predict_frames,
                       train)
from .tracking import save_tracks

log = logging.getLogger("staog")

COMMANDS = ("synth", "train-aog", "detect", "track", "train-fluent", "eval-fluent",
            "eval-parts", "oracle-suite")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in _names(text)]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="staog", description="Spatial-temporal And-Or graph for car fluents.")
    p.add_argument("--version", action="version", version=f"staog {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                           parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key = value file; flags override it")
        s.add_argument("--seed", type=int, default=7)
        s.add_argument("--workers", type=int, default=1)
        return s

    s = cmd("synth", "render synthetic videos, annotations and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--static-train", type=int, default=6)
    s.add_argument("--static-test", type=int, default=10)
    s.add_argument("--background", type=int, default=2)
    s.add_argument("--fluent-train", type=int, default=20)
    s.add_argument("--fluent-test", type=int, default=10)
    s.add_argument("--labels", type=_names, default=list(BENCH_FLUENTS))
    s.add_argument("--parts", type=_names, default=list(BENCH_PARTS))
    s.add_argument("--static-frames", type=int, default=8)
    s.add_argument("--fluent-frames", type=int, default=24)

    s = cmd("train-aog", "initialize templates and train the ST-AOG")
    s.add_argument("--data", required=True, help="manifest.json or dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="per-iteration CSV (default: next to --out)")
    s.add_argument("--parts", type=_names, default=None)
    s.add_argument("--c", type=float, default=1.0)
    s.add_argument("--ov", type=float, default=0.5)
    s.add_argument("--outer", type=int, default=2)
    s.add_argument("--inner", type=int, default=6)
    s.add_argument("--radius", type=int, default=2)
    s.add_argument("--stride", type=int, default=3)
    s.add_argument("--cache", type=int, default=3000)
    s.add_argument("--solver", choices=("dual", "subgradient"), default="dual")

    s = cmd("detect", "detect cars and parts in one video")
    s.add_argument("--model", required=True)
    s.add_argument("--video", required=True, help="directory of PGM frames")
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float, default=float("-inf"))
    s.add_argument("--topk", type=int, default=5)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--nms", type=float, default=0.65)
    s.add_argument("--lbp-iters", type=int, default=20)
    s.add_argument("--lbp-eps", type=float, default=1e-6)

    s = cmd("track", "link part proposals into one track per part")
    s.add_argument("--detections", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--parts", type=_names, default=None)
    s.add_argument("--theta", type=_floats, default=[0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
    s.add_argument("--lam", type=float, default=1.0)

    for name, help_ in (("train-fluent", "train the TPS codebook and fluent classifiers"),
                        ("eval-fluent", "classify test videos; confusion matrix and MP")):
        s = cmd(name, help_)
        s.add_argument("--data", required=True, help="manifest.json or dataset directory")
        s.add_argument("--model", required=True, help="trained ST-AOG")
        s.add_argument("--out", required=True)
        s.add_argument("--stride", type=int, default=2)
        s.add_argument("--topk", type=int, default=5)
        if name == "train-fluent":
            s.add_argument("--k", type=int, default=8)
            s.add_argument("--pca", type=float, default=0.5,
                           help="fraction of the input dimension, or a dimension if >= 1")
            s.add_argument("--c", type=float, default=1.0)
        else:
            s.add_argument("--fluent", required=True, help="trained fluent model")

    s = cmd("eval-parts", "part localization and status rates with given car boxes")
    s.add_argument("--data", required=True, help="manifest.json or dataset directory")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--stride", type=int, default=3)
    s.add_argument("--include-fluent", action="store_true")

    s = cmd("oracle-suite", "run every brute-force equivalence check")
    s.add_argument("--out", required=True, help="CSV report")
    return p


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {n}: expected key = value")
        k, v = (t.strip() for t in line.split("=", 1))
        out[k.replace("-", "_")] = v.strip('"')
    return out


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        cfg = read_config(args.config)
        bad = sorted(set(cfg) - known - {"config"})
        if bad:
            raise UsageError(f"{args.config}: unknown keys {bad}")
        flags = {a.dest: a for a in sub._actions}
        for k, v in cfg.items():
            a = flags[k]
            if isinstance(a, argparse._StoreTrueAction):
                cfg[k] = v.lower() in ("1", "true", "yes")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _run_log(args, out: Path):
    path = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    conf = {k: v for k, v in sorted(vars(args).items())}
    path.write_text(json.dumps({"tool": "staog", "version": __version__,
                                "command": args.command, "config": conf},
                               indent=1, default=str) + "\n")


# ----------------------------------------------------------------- commands


def cmd_synth(args):
    out = Path(args.out)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    for lab in args.labels:
        if lab not in FLUENTS:
            raise ValueError(f"unknown fluent label {lab!r}")
    for p in args.parts:
        if p not in PARTS:
            raise ValueError(f"unknown part {p!r}")
    base = args.seed * 1_000_000
    scen = []
    for i in range(args.static_train):
        scen.append((static_scenario(base + i, args.parts, args.static_frames), "train"))
    for i in range(args.static_test):
        scen.append((static_scenario(base + 500_000 + i, args.parts, args.static_frames), "test"))
    for i in range(args.background):
        scen.append((background_scenario(base + i, args.static_frames), "train"))
    for lab in args.labels:
        for i in range(args.fluent_train):
            scen.append((fluent_scenario(lab, base + i, args.parts, args.fluent_frames), "train"))
        for i in range(args.fluent_test):
            scen.append((fluent_scenario(lab, base + 500_000 + i, args.parts, args.fluent_frames),
                         "test"))
    entries, specs = [], []
    for sc, split in scen:
        frames, ann = synth_generate(sc)
        save_frames(frames, out / "videos" / sc.video_id)
        a = ""
        if ann is not None:
            a = f"annotations/{sc.video_id}.json"
            save_annotation(ann, out / a)
        entries.append(ManifestEntry(f"videos/{sc.video_id}", a, split))
        specs.append(sc.to_dict())
    save_manifest(entries, out / "manifest.json")
    (out / "scenarios.json").write_text(json.dumps(specs, indent=1))
    log.info("wrote %d videos to %s", len(entries), out)
    return out


def _manifest(path) -> list:
    """Manifest entries; a dataset directory means its manifest.json."""
    p = Path(path)
    return load_manifest(p / "manifest.json" if p.is_dir() else p)


def _entries(path, split, fluent: bool | None):
    """Manifest entries of a split; ``fluent`` selects annotated videos with
    (True) or without (False) fluent labels, None keeps all annotated ones."""
    out = []
    for e in _manifest(path):
        if e.split != split or not e.annotation:
            continue
        ann = load_annotation(e.annotation)
        if fluent is None or bool(ann.fluents) == fluent:
            out.append((e, ann))
    return out


def cmd_train_aog(args):
    pos, neg = [], []
    for e in _manifest(args.data):
        if e.split != "train":
            continue
        frames = load_frames(e.video)
        if not frames:
            raise ValueError(f"no frames in {e.video}")
        if not e.annotation:
            neg.append(make_sample(frames, None, args.stride, video_id=Path(e.video).name))
            continue
        ann = load_annotation(e.annotation)
        if ann.fluents:
            continue
        pos.append(make_sample(frames, ann, args.stride))
    if not pos:
        raise ValueError("manifest has no annotated static training videos")
    parts = args.parts or sorted({p.name for s in pos for p in s.annotation.frames[0].parts})
    cfg = TrainConfig(C=args.c, ov=args.ov, radius=args.radius, outer=args.outer,
                      inner=args.inner, solver=args.solver, cache_capacity=args.cache,
                      stride=args.stride, seed=args.seed, workers=args.workers)
    g = init_templates(pos, parts, cfg)
    out = Path(args.out)
    logp = Path(args.log) if args.log else out.with_name(out.stem + ".iterations.csv")
    g, rows = train(g, pos, cfg, neg, log_path=logp)
    save_model(g, out)
    return out


def cmd_detect(args):
    g = load_model(args.model)
    frames = load_frames(args.video)
    if len(frames) < 2:
        raise ValueError(f"{args.video}: need at least two frames")
    smp = make_sample(frames, None, args.stride)
    if args.lbp_iters < 1 or args.lbp_eps <= 0:
        raise ValueError("need --lbp-iters >= 1 and --lbp-eps > 0")
    cfg = DetectConfig(tau=args.tau, nms_overlap=args.nms, topk=args.topk, stride=args.stride,
                       lbp=LBPConfig(args.lbp_iters, args.lbp_eps))
    per_pair, _ = detect(g, smp.feat_list(), smp.flow_list(), cfg, workers=args.workers)
    out = Path(args.out)
    write_detections(per_pair, out)
    return out


def cmd_track(args):
    props = read_proposals(args.detections)
    if len(args.theta) != 6:
        raise ValueError("--theta needs six comma-separated values")
    parts = args.parts or props.parts()
    if not parts:
        raise ValueError(f"{args.detections}: no part proposals to track")
    tracks = link_tracks(props, parts, args.theta, args.lam)
    out = Path(args.out)
    save_tracks([tracks[p] for p in parts], out)
    return out


def _locals_job(job):
    model_path, video, parts, stride, topk = job
    g = load_model(model_path)
    return video_locals(g, load_frames(video), parts, stride, topk)[0]


def _video_locals(args, items, parts):
    jobs = [(args.model, e.video, parts, args.stride, args.topk) for e, _ in items]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            return list(ex.map(_locals_job, jobs))
    return [_locals_job(j) for j in jobs]


def graph_parts(g) -> list[str]:
    names = {t.part for t in g.terminals if t.part and t.part != "body"}
    return list(g.meta.get("parts", [])) or sorted(names)


def cmd_train_fluent(args):
    items = _entries(args.data, "train", True)
    if not items:
        raise ValueError("manifest has no fluent training videos")
    parts = graph_parts(load_model(args.model))
    locs = _video_locals(args, items, parts)
    pca = int(args.pca) if args.pca >= 1 else args.pca
    cb = train_codebook(np.vstack(locs), args.k, pca, args.seed)
    labels = [a.label for _, a in items]
    classes = [c for c in FLUENTS if c in set(labels)]
    model = train_fluent([vlad_encode(x, cb) for x in locs], labels, args.c, args.seed, classes)
    model.codebook, model.parts = cb, parts
    out = Path(args.out)
    save_fluent_model(model, out)
    return out


def cmd_eval_fluent(args):
    model = load_fluent_model(args.fluent)
    items = _entries(args.data, "test", True)
    if not items:
        raise ValueError("manifest has no fluent test videos")
    locs = _video_locals(args, items, model.parts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred, truth = [], []
    with open(out / "predictions.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["video", "truth", "predicted"])
        for (e, a), x in zip(items, locs):
            lab, _ = classify(model, vlad_encode(x, model.codebook))
            if a.label not in model.labels:
                raise ValueError(f"{a.video_id}: label {a.label} unknown to the model")
            pred.append(model.labels.index(lab))
            truth.append(model.labels.index(a.label))
            wr.writerow([a.video_id, a.label, lab])
    M, mp = confusion_and_mp(pred, truth, len(model.labels))
    with open(out / "confusion.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["truth"] + model.labels)
        for lab, row in zip(model.labels, M):
            wr.writerow([lab] + [repr(float(v)) for v in row])
    (out / "metrics.json").write_text(json.dumps({"MP": mp, "videos": len(truth)}, indent=1) + "\n")
    log.info("MP %.4f over %d videos", mp, len(truth))
    return out


def cmd_eval_parts(args):
    g = load_model(args.model)
    items = _entries(args.data, "test", None if args.include_fluent else False)
    if not items:
        raise ValueError("manifest has no annotated test videos")
    preds, anns = [], []
    for e, a in items:
        smp = make_sample(load_frames(e.video), a, args.stride)
        preds.append(predict_frames(g, smp))
        anns.append(a)
    parts = graph_parts(g)
    loc = eval_part_localization(preds, anns, args.iou, parts)
    st = eval_status(preds, anns, args.iou, parts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "part_rates.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["part", "localization", "status"])
        for p in sorted(loc):
            wr.writerow([p, repr(loc[p]), repr(st[p])])
    (out / "metrics.json").write_text(json.dumps(
        {"localization": mean_rate(loc), "status": mean_rate(st), "videos": len(anns)},
        indent=1) + "\n")
    return out


def cmd_oracle_suite(args):
    out = Path(args.out)
    checks = oracle_suite(args.seed)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["check", "result", "detail"])
        for c in checks:
            wr.writerow([c.name, "pass" if c.passed else "fail",
                         "; ".join(f"{k}={v}" for k, v in c.detail.items())])
    for c in checks:
        log.info("%s", c.line())
    if not all(c.passed for c in checks):
        raise RuntimeError("oracle suite reported failures")
    return out


HANDLERS = {"synth": cmd_synth, "train-aog": cmd_train_aog, "detect": cmd_detect,
            "track": cmd_track, "train-fluent": cmd_train_fluent,
            "eval-fluent": cmd_eval_fluent, "eval-parts": cmd_eval_parts,
            "oracle-suite": cmd_oracle_suite}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse(sys.argv[1:] if argv is None else [str(a) for a in argv])
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.workers < 1:
        print("staog: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        out = HANDLERS[args.command](args)
        _run_log(args, Path(out))
    except (ValueError, AnnotationError, FileNotFoundError, UsageError) as e:
        log.error("%s", e)
        return 1
    except (TrainingError, RuntimeError, OSError) as e:
        log.error("%s", e)
        return 2
    except Exception as e:  # noqa: BLE001 - unexpected failure is a runtime error
        log.exception("unexpected failure: %s", e)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
