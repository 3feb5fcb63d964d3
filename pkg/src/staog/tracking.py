"""Part-based HMM: link per-frame part proposals into one track per part by
exact dynamic programming."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class Proposal:
    frame: int
    box: tuple[float, float, float, float]  # x, y, w, h in pixels
    status: str
    unary: float
    part: str = ""

    @property
    def scale(self) -> float:
        return math.sqrt(self.box[2] * self.box[3])

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return x + w / 2.0, y + h / 2.0


@dataclass
class PartTrack:
    part: str
    proposals: list[Proposal]
    total_score: float
    indices: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"part": self.part,
                "frames": [{"frame": p.frame, "box": [float(v) for v in p.box],
                            "status": p.status, "unary": float(p.unary)} for p in self.proposals],
                "total_score": float(self.total_score)}


def box_overlap(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 for degenerate boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def transition_feature(a: Proposal, b: Proposal) -> np.ndarray:
    """(dx, dx^2, dy, dy^2, ds, ds^2): centre motion in units of a's scale and
    log scale change."""
    if a.box[2] * a.box[3] <= 0 or b.box[2] * b.box[3] <= 0:
        raise ValueError("zero-area box in transition")
    sa = a.scale
    (ax, ay), (bx, by) = a.center, b.center
    dx = (bx - ax) / sa
    dy = (by - ay) / sa
    ds = math.log(b.scale / sa)
    return np.array([dx, dx * dx, dy, dy * dy, ds, ds * ds])


def _signed(theta) -> np.ndarray:
    th = np.asarray(theta, dtype=np.float64).reshape(6)
    if (th[[1, 3, 5]] < 0).any():
        raise ValueError("quadratic track weights are penalty magnitudes and must be >= 0")
    return th * np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])


def transition_score(a: Proposal, b: Proposal, theta, lam: float = 1.0) -> float:
    return float(_signed(theta) @ transition_feature(a, b) + lam * box_overlap(a.box, b.box))


def path_score(props: Sequence[Proposal], theta, lam: float = 1.0) -> float:
    s = sum(p.unary for p in props)
    for a, b in zip(props[:-1], props[1:]):
        s += transition_score(a, b, theta, lam)
    return float(s)


def viterbi_link(proposals: Sequence[Sequence[Proposal]], theta, lam: float = 1.0,
                 part: str = "") -> PartTrack:
    """Best path (one proposal per frame) under unary + transition + overlap."""
    if len(proposals) == 0:
        raise ValueError("no frames to link")
    if any(len(f) == 0 for f in proposals):
        raise ValueError("every frame needs at least one proposal")
    w = _signed(theta)
    score = np.array([p.unary for p in proposals[0]], dtype=np.float64)
    back = []
    for prev, cur in zip(proposals[:-1], proposals[1:]):
        T = np.empty((len(prev), len(cur)))
        for i, a in enumerate(prev):
            for j, b in enumerate(cur):
                T[i, j] = w @ transition_feature(a, b) + lam * box_overlap(a.box, b.box)
        tot = score[:, None] + T
        arg = np.argmax(tot, axis=0)
        back.append(arg)
        score = tot[arg, np.arange(len(cur))] + np.array([b.unary for b in cur])
    j = int(np.argmax(score))
    best = float(score[j])
    idx = [j]
    for arg in reversed(back):
        j = int(arg[j])
        idx.append(j)
    idx.reverse()
    chosen = [proposals[f][k] for f, k in enumerate(idx)]
    return PartTrack(part, chosen, best, idx)


def save_tracks(tracks: Sequence[PartTrack], path) -> None:
    with Path(path).open("w") as fh:
        for t in tracks:
            fh.write(json.dumps(t.to_json()) + "\n")


def load_tracks(path) -> list[PartTrack]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        props = [Proposal(f["frame"], tuple(f["box"]), f["status"], f["unary"], d["part"])
                 for f in d["frames"]]
        out.append(PartTrack(d["part"], props, d["total_score"]))
    return out
