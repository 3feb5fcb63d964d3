"""Annotations, manifests, a synthetic car-video generator and frame-level
part evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .pyramid import Frame
from .tracking import box_overlap

SCHEMA_VERSION = 1

PANEL_STATUSES = ("open", "close", "occluded")
LIGHT_STATUSES = ("on", "off", "occluded")

FLUENTS = (
    "open_lf_door", "close_lf_door", "open_lb_door", "close_lb_door",
    "open_rf_door", "close_rf_door", "open_rb_door", "close_rb_door",
    "open_hood", "close_hood", "open_trunk", "close_trunk",
    "change_left_lane", "change_right_lane", "turn_left", "turn_right",
)

# pixel layout relative to the car's top-left corner for a 64x32 car; the
# car faces left, its right side is the top edge
CLOSED_BOX = {
    "rh_light": (0, 0, 8, 8), "lh_light": (0, 24, 8, 8),
    "rt_light": (56, 0, 8, 8), "lt_light": (56, 24, 8, 8),
    "hood": (8, 8, 12, 16), "trunk": (44, 8, 12, 16),
    "rf_door": (20, 0, 12, 12), "rb_door": (32, 0, 12, 12),
    "lf_door": (20, 20, 12, 12), "lb_door": (32, 20, 12, 12),
}
OPEN_BOX = {
    "hood": (8, -16, 12, 24), "trunk": (44, -16, 12, 24),
    "rf_door": (20, -12, 12, 24), "rb_door": (32, -12, 12, 24),
    "lf_door": (20, 20, 12, 24), "lb_door": (32, 20, 12, 24),
}
PARTS = tuple(CLOSED_BOX)


def is_light(part: str) -> bool:
    return part.endswith("_light")


def vocabulary(part: str) -> tuple[str, ...]:
    return LIGHT_STATUSES if is_light(part) else PANEL_STATUSES


class AnnotationError(ValueError):
    pass


# ------------------------------------------------------------ annotations


@dataclass
class PartAnnotation:
    name: str
    box: tuple
    status: str
    occluded: bool = False


@dataclass
class FrameAnnotation:
    car_box: tuple
    view: int
    car_type: int
    parts: list[PartAnnotation] = field(default_factory=list)

    def part(self, name: str) -> PartAnnotation | None:
        for p in self.parts:
            if p.name == name:
                return p
        return None


@dataclass
class FluentInterval:
    label: str
    start: int
    end: int


@dataclass
class VideoAnnotation:
    video_id: str
    frame_count: int
    width: int
    height: int
    frames: list[FrameAnnotation]
    fluents: list[FluentInterval] = field(default_factory=list)

    @property
    def label(self) -> str | None:
        return self.fluents[0].label if self.fluents else None


def validate_annotation(ann: VideoAnnotation) -> list[str]:
    errs = []
    if len(ann.frames) != ann.frame_count:
        errs.append(f"frame_count {ann.frame_count} but {len(ann.frames)} frames listed")
    for i, fr in enumerate(ann.frames):
        for p in fr.parts:
            if p.status not in vocabulary(p.name):
                errs.append(f"frame {i} part {p.name}: unknown status {p.status!r}")
            x, y, w, h = p.box
            if x < 0 or y < 0 or x + w > ann.width or y + h > ann.height or w <= 0 or h <= 0:
                errs.append(f"frame {i} part {p.name}: box {tuple(p.box)} outside "
                            f"{ann.width}x{ann.height} frame")
    for f in ann.fluents:
        if f.label not in FLUENTS:
            errs.append(f"unknown fluent label {f.label!r}")
        if not (0 <= f.start <= f.end < ann.frame_count):
            errs.append(f"fluent {f.label} interval [{f.start}, {f.end}] outside video")
    return errs


def annotation_to_dict(ann: VideoAnnotation) -> dict:
    d = asdict(ann)
    d["schema_version"] = SCHEMA_VERSION
    return d


def annotation_from_dict(d: dict) -> VideoAnnotation:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise AnnotationError(f"schema_version {d.get('schema_version')} != {SCHEMA_VERSION}")
    try:
        frames = [FrameAnnotation(tuple(f["car_box"]), int(f["view"]), int(f["car_type"]),
                                  [PartAnnotation(p["name"], tuple(p["box"]), p["status"],
                                                  bool(p.get("occluded", False)))
                                   for p in f["parts"]])
                  for f in d["frames"]]
        ann = VideoAnnotation(str(d["video_id"]), int(d["frame_count"]), int(d["width"]),
                              int(d["height"]), frames,
                              [FluentInterval(f["label"], int(f["start"]), int(f["end"]))
                               for f in d.get("fluents", [])])
    except (KeyError, TypeError) as e:
        raise AnnotationError(f"malformed annotation: missing or bad field {e}") from e
    errs = validate_annotation(ann)
    if errs:
        raise AnnotationError("; ".join(errs))
    return ann


def save_annotation(ann: VideoAnnotation, path) -> None:
    Path(path).write_text(json.dumps(annotation_to_dict(ann), indent=1))


def load_annotation(path) -> VideoAnnotation:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    return annotation_from_dict(d)


# --------------------------------------------------------------- frames IO


def save_frames(frames: Sequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        px = f.pixels if isinstance(f, Frame) else np.asarray(f)
        Image.fromarray(np.round(np.clip(px, 0, 1) * 255).astype(np.uint8), mode="L").save(
            d / f"{i:05d}.pgm")
    return d


def load_frames(directory) -> list[Frame]:
    files = sorted(Path(directory).glob("*.pgm"))
    return [Frame(np.asarray(Image.open(p), dtype=np.float64) / 255.0, i)
            for i, p in enumerate(files)]


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    video: str
    annotation: str  # "" for a car-free background video
    split: str = "train"


def save_manifest(entries: Sequence[ManifestEntry], path) -> None:
    Path(path).write_text(json.dumps([asdict(e) for e in entries], indent=1))


def load_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    out = []
    for i, e in enumerate(json.loads(Path(path).read_text())):
        if e.get("split") not in ("train", "test"):
            raise AnnotationError(f"manifest entry {i}: split must be train or test")
        if "video" not in e:
            raise AnnotationError(f"manifest entry {i}: missing video")
        v = Path(e["video"])
        a = e.get("annotation") or ""  # empty: car-free background video
        if a:
            a = str(Path(a) if Path(a).is_absolute() else base / a)
        out.append(ManifestEntry(str(v if v.is_absolute() else base / v), a, e["split"]))
    return out


# --------------------------------------------------------------- generator


@dataclass
class PartScript:
    part: str
    kind: str  # "open", "close" or "blink"
    start: int
    end: int
    period: int = 6
    duty: float = 0.5


@dataclass
class SyntheticScenario:
    seed: int = 0
    width: int = 128
    height: int = 96
    n_frames: int = 24
    car_xy: tuple = (32, 32)
    car_velocity: tuple = (0.0, 0.0)
    view: int = 0
    car_type: int = 0
    parts: tuple = PARTS
    statuses: dict = field(default_factory=dict)  # initial status per part
    scripts: list = field(default_factory=list)
    fluents: list = field(default_factory=list)  # (label, start, end)
    clutter: int = 6
    noise: float = 0.02
    occluders: list = field(default_factory=list)  # (x, y, w, h) in pixels
    video_id: str = ""
    draw_car: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scripts"] = [asdict(s) if not isinstance(s, dict) else s for s in self.scripts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScenario":
        d = dict(d)
        d["scripts"] = [PartScript(**s) for s in d.get("scripts", [])]
        for k in ("car_xy", "car_velocity", "parts"):
            if k in d:
                d[k] = tuple(d[k])
        d["fluents"] = [tuple(f) for f in d.get("fluents", [])]
        d["occluders"] = [tuple(o) for o in d.get("occluders", [])]
        return cls(**d)


BG, BODY, EDGE, PANEL_OPEN, HOLE, LIGHT_ON, LIGHT_OFF, OCCLUDER = \
    0.2, 0.55, 0.05, 0.85, 0.15, 1.0, 0.3, 0.4


def _lerp_box(a, b, t):
    return tuple(int(round(u + (v - u) * t)) for u, v in zip(a, b))


def _part_state(sc: SyntheticScenario, part: str, t: int):
    """(status, relative box, opening fraction) of a part at frame t."""
    vocab = vocabulary(part)
    st = sc.statuses.get(part, vocab[1])
    alpha = 1.0 if (not is_light(part) and st == "open") else 0.0
    for s in sc.scripts:
        if s.part != part:
            continue
        if s.kind in ("open", "close"):
            if t < s.start:
                a = 0.0
            elif t >= s.end:
                a = 1.0
            else:
                a = (t - s.start) / max(s.end - s.start, 1)
            alpha = a if s.kind == "open" else 1.0 - a
            st = "open" if alpha >= 0.5 else "close"
        elif s.kind == "blink" and s.start <= t <= s.end:
            on = ((t - s.start) % s.period) < s.duty * s.period
            st = "on" if on else "off"
    if is_light(part):
        return st, CLOSED_BOX[part], 0.0
    box = _lerp_box(CLOSED_BOX[part], OPEN_BOX[part], alpha)
    return st, box, alpha


def _fill(img, box, value):
    x, y, w, h = (int(round(v)) for v in box)
    H, W = img.shape
    x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
    if x1 > x0 and y1 > y0:
        img[y0:y1, x0:x1] = value


def _outline(img, box, value, t=1):
    x, y, w, h = box
    _fill(img, (x, y, w, t), value)
    _fill(img, (x, y + h - t, w, t), value)
    _fill(img, (x, y, t, h), value)
    _fill(img, (x + w - t, y, t, h), value)


def synth_generate(sc: SyntheticScenario):
    """Render frames and the exact annotation of a scenario."""
    rng = np.random.default_rng(sc.seed)
    W, H = sc.width, sc.height
    base = np.full((H, W), BG)
    for _ in range(sc.clutter):
        w, h = rng.integers(4, 17, 2)
        x, y = rng.integers(0, W - w), rng.integers(0, H - h)
        _fill(base, (x, y, w, h), float(rng.uniform(0.1, 0.45)))
    noise = rng.normal(0.0, sc.noise, size=(sc.n_frames, H, W)) if sc.noise > 0 else None
    frames, fanns = [], []
    cw, ch = 64, 32
    for t in range(sc.n_frames):
        img = base.copy()
        cx = int(round(sc.car_xy[0] + sc.car_velocity[0] * t))
        cy = int(round(sc.car_xy[1] + sc.car_velocity[1] * t))
        parts = []
        if not sc.draw_car:
            if noise is not None:
                img = img + noise[t]
            frames.append(Frame(np.clip(img, 0.0, 1.0), t))
            continue
        _fill(img, (cx, cy, cw, ch), BODY)
        _outline(img, (cx, cy, cw, ch), EDGE)
        for name in sc.parts:
            st, rb, alpha = _part_state(sc, name, t)
            box = (cx + rb[0], cy + rb[1], rb[2], rb[3])
            if box[0] < 0 or box[1] < 0 or box[0] + box[2] > W or box[1] + box[3] > H:
                raise ValueError(f"part {name} leaves the canvas at frame {t}: {box}")
            if is_light(name):
                _fill(img, box, LIGHT_ON if st == "on" else LIGHT_OFF)
            else:
                cb = CLOSED_BOX[name]
                closed = (cx + cb[0], cy + cb[1], cb[2], cb[3])
                if alpha > 0:
                    _fill(img, closed, BODY + (HOLE - BODY) * alpha)
                    _fill(img, box, BODY + (PANEL_OPEN - BODY) * alpha)
                _outline(img, box, EDGE)
            parts.append(PartAnnotation(name, box, st))
        for ob in sc.occluders:
            _fill(img, ob, OCCLUDER)
        for p in parts:
            cover = sum(_inter(p.box, ob) for ob in sc.occluders) / (p.box[2] * p.box[3])
            if cover >= 0.5:
                p.status, p.occluded = "occluded", True
        if noise is not None:
            img = img + noise[t]
        frames.append(Frame(np.clip(img, 0.0, 1.0), t))
        fanns.append(FrameAnnotation((cx, cy, cw, ch), sc.view, sc.car_type, parts))
    if not sc.draw_car:
        return frames, None
    ann = VideoAnnotation(sc.video_id or f"synth-{sc.seed}", sc.n_frames, W, H, fanns,
                          [FluentInterval(l, s, e) for l, s, e in sc.fluents])
    return frames, ann


def _inter(a, b) -> float:
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    return float(max(iw, 0) * max(ih, 0))


def fluent_scenario(label: str, seed: int, parts: Sequence[str] = PARTS,
                    n_frames: int = 24, clutter: int = 6, noise: float = 0.02,
                    width: int = 128, height: int = 96) -> SyntheticScenario:
    """A randomized scenario realizing one of the 16 fluent labels."""
    if label not in FLUENTS:
        raise ValueError(f"unknown fluent {label!r}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(2, n_frames // 2 - 2))
    end = int(min(n_frames - 2, start + rng.integers(3, 6)))
    statuses, scripts = {}, []
    vel = (0.0, 0.0)
    if label.startswith(("open_", "close_")):
        kind, part = label.split("_", 1)
        if part not in parts:
            raise ValueError(f"fluent {label} needs part {part}")
        scripts.append(PartScript(part, kind, start, end))
        statuses[part] = "close" if kind == "open" else "open"
        fl_start, fl_end = start, end
    else:
        side = "l" if "left" in label else "r"
        lights = [p for p in (f"{side}h_light", f"{side}t_light") if p in parts]
        if not lights:
            raise ValueError(f"fluent {label} needs a {side}-side light")
        period = int(rng.integers(2, 5)) * 2
        start = int(rng.integers(0, 4))
        end = n_frames - 1
        for p in lights:
            scripts.append(PartScript(p, "blink", start, end, period, 0.5))
        if label.startswith("change"):
            vel = (0.0, -0.5 if side == "l" else 0.5)
        fl_start, fl_end = start, end
    # room for open panels above (16 px) and below (12 px) the car
    drift = abs(vel[1]) * n_frames
    ymin = 16 + (drift if vel[1] < 0 else 0)
    ymax = height - 32 - 12 - (drift if vel[1] > 0 else 0)
    x = int(rng.integers(0, (width - 64) // 4 + 1)) * 4
    y = int(rng.integers(int(np.ceil(ymin / 4)), int(ymax // 4) + 1)) * 4
    return SyntheticScenario(seed=seed, width=width, height=height, n_frames=n_frames,
                             car_xy=(x, y), car_velocity=vel, parts=tuple(parts),
                             statuses=statuses, scripts=scripts,
                             fluents=[(label, fl_start, fl_end)], clutter=clutter,
                             noise=noise, video_id=f"{label}-{seed}")


def static_scenario(seed: int, parts: Sequence[str] = PARTS, n_frames: int = 8,
                    clutter: int = 6, noise: float = 0.02, width: int = 128,
                    height: int = 96) -> SyntheticScenario:
    """Random fixed statuses per part and no fluent (separable status data)."""
    rng = np.random.default_rng(seed)
    statuses = {p: vocabulary(p)[int(rng.integers(0, 2))] for p in parts}
    x = int(rng.integers(0, (width - 64) // 4 + 1)) * 4
    y = int(rng.integers(4, (height - 32 - 12) // 4 + 1)) * 4
    return SyntheticScenario(seed=seed, width=width, height=height, n_frames=n_frames,
                             car_xy=(x, y), parts=tuple(parts), statuses=statuses,
                             clutter=clutter, noise=noise, video_id=f"static-{seed}")


def background_scenario(seed: int, n_frames: int = 8, clutter: int = 12, noise: float = 0.02,
                        width: int = 128, height: int = 96) -> SyntheticScenario:
    """Clutter only; ``synth_generate`` returns ``(frames, None)``."""
    return SyntheticScenario(seed=seed, width=width, height=height, n_frames=n_frames,
                             parts=(), clutter=clutter, noise=noise,
                             video_id=f"background-{seed}", draw_car=False)


# --------------------------------------------------------------- evaluation


def _check_predictions(pred: dict, ann: VideoAnnotation):
    for f, parts in pred.items():
        if not (0 <= f < ann.frame_count):
            raise ValueError(f"prediction for frame {f} outside video {ann.video_id}")
        for p in ann.frames[f].parts:
            if p.name not in parts:
                raise ValueError(f"{ann.video_id} frame {f}: no prediction for part {p.name}")


def _rates(predictions, annotations, iou_thresh, need_status, parts=None):
    hit, tot = {}, {}
    for pred, ann in zip(predictions, annotations):
        _check_predictions(pred, ann)
        for f in sorted(pred):
            for p in ann.frames[f].parts:
                if parts is not None and p.name not in parts:
                    continue
                box, st = pred[f][p.name]
                if p.status == "occluded" and st == "occluded":
                    ok = True
                else:
                    ok = box_overlap(tuple(box), p.box) >= iou_thresh
                    if need_status:
                        ok = ok and st == p.status
                tot[p.name] = tot.get(p.name, 0) + 1
                hit[p.name] = hit.get(p.name, 0) + int(ok)
    return {k: hit[k] / tot[k] for k in sorted(tot)}


def eval_part_localization(predictions: Sequence[dict], annotations: Sequence[VideoAnnotation],
                           iou_thresh: float = 0.5, parts=None) -> dict:
    """Per-part fraction of ground-truth instances localized at IoU >= thresh.

    ``predictions[v][frame][part] = (box, status)``, one per annotated car.
    """
    return _rates(predictions, annotations, iou_thresh, False, parts)


def eval_status(predictions, annotations, iou_thresh: float = 0.5, parts=None) -> dict:
    """Per-part fraction with IoU >= thresh and the right status."""
    return _rates(predictions, annotations, iou_thresh, True, parts)


def mean_rate(rates: dict) -> float:
    return float(np.mean(list(rates.values()))) if rates else 0.0
