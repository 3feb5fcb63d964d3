"""Spatial-temporal window scores, parse retrieval and multi-proposal
detection over a video."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..graph import AND, OR, TERMINAL, AOGraph, FrameParse, ParseTree, subtree_score
from ..pyramid import FeaturePyramid, FlowPyramid
from ..tracking import Proposal, box_overlap
from .dt import NEG_INF
from .framepass import Constraints, FrameMaps, FrameScorer, backtrace, frame_pass
from .temporal import CoupledMaps, LBPConfig, temporal_couple


@dataclass
class WindowMaps:
    """Root score per level for one frame pair, with the branch argmax."""
    coupled: CoupledMaps
    values: dict  # level -> (H, W)
    arg: dict  # level -> (H, W) root child index

    def best(self):
        """(score, level, x, y) of the global maximum (first in level/row order on ties)."""
        out = (NEG_INF, -1, -1, -1)
        for lam in sorted(self.values):
            v = self.values[lam]
            if v.size and np.isfinite(v).any():
                i = int(np.argmax(v))
                y, x = divmod(i, v.shape[1])
                if v[y, x] > out[0]:
                    out = (float(v[y, x]), lam, x, y)
        return out


def st_window_score(g: AOGraph, cm: CoupledMaps) -> WindowMaps:
    """Root map per level: max over root children of bias + decoded pair score."""
    root = g.nodes[g.root]
    cons = cm.fm0.constraints
    values, args = {}, {}
    for lam in cm.fm0.levels:
        stack = []
        for j, c in enumerate(root.children):
            bp = cm.branches[(c, lam)]
            if cons is not None and cons.branches is not None and j not in cons.branches:
                stack.append(np.full_like(bp.pair, NEG_INF))
            else:
                stack.append(bp.pair + root.child_bias[j])
        stack = np.stack(stack)
        arg = np.argmax(stack, axis=0)
        vals = np.take_along_axis(stack, arg[None], axis=0)[0]
        m = cm.fm0.root_mask(g.root, lam)
        if m is not None:
            vals = np.where(m, vals, NEG_INF)
        values[lam], args[lam] = vals, arg
    return WindowMaps(cm, values, args)


def retrieve_parse(g: AOGraph, wm: WindowMaps, level: int, cell, pair: int = 0) -> ParseTree:
    """Backtrace the parse tree behind ``wm.values[level][y, x]``."""
    if level not in wm.values:
        raise IndexError(f"level {level} not in window maps")
    x, y = int(cell[0]), int(cell[1])
    H, W = wm.values[level].shape
    if not (0 <= x < W and 0 <= y < H):
        raise IndexError(f"cell {(x, y)} outside {W}x{H} root lattice")
    score = float(wm.values[level][y, x])
    if not np.isfinite(score):
        raise ValueError(f"no parse at level {level} cell {(x, y)}")
    cm = wm.coupled
    j = int(wm.arg[level][y, x])
    v = g.nodes[g.root].children[j]
    bp = cm.branches[(v, level)]
    q = (int(bp.qx[y, x]), int(bp.qy[y, x]))
    over0, over1 = {}, {}
    for ch in bp.chains:
        over0[ch.part] = (int(ch.s0[y, x]), (ch.level, int(ch.x0[y, x]), int(ch.y0[y, x])))
        over1[ch.part] = (int(ch.s1[y, x]), (ch.level, int(ch.x1[y, x]), int(ch.y1[y, x])))
    frames = []
    for fm, c, over in ((cm.fm0, (x, y), over0), (cm.fm1, q, over1)):
        fp = FrameParse()
        fp.placements[g.root] = (level, c[0], c[1])
        fp.choices[g.root] = j
        backtrace(g, fm, v, level, c, fp, over)
        frames.append(fp)
    return ParseTree(level, (frames[0], frames[1]), score, pair)


# ----------------------------------------------------------------- boxes


def cell_box(x, y, w, h, level: int, pyr: FeaturePyramid):
    """Pixel box (x, y, w, h) of a w x h cell window at ``level``."""
    k = pyr.cell_size / pyr.scales[level]
    return (x * k, y * k, w * k, h * k)


@dataclass
class PartState:
    name: str
    box: tuple
    status: str
    score: float
    node: int = -1


@dataclass
class FrameDescription:
    car_box: tuple
    view: int | None
    car_type: int | None
    parts: dict  # part name -> PartState


def describe_frame(g: AOGraph, fp: FrameParse, pyr: FeaturePyramid) -> FrameDescription:
    root = g.nodes[g.root]
    v = root.children[fp.choices[g.root]]
    n = g.nodes[v]
    lam, cx, cy = fp.placements[g.root]
    parts = {}
    boxes = []
    queue = [v]
    while queue:
        u = queue.pop(0)
        m = g.nodes[u]
        if m.kind == TERMINAL:
            pl, tx, ty = fp.placements[u]
            b = cell_box(tx, ty, m.size[0], m.size[1], pl, pyr)
            boxes.append(b)
            continue
        if m.kind == OR and m.part is not None:
            j = fp.choices[u]
            t = g.nodes[m.children[j]]
            pl, tx, ty = fp.placements[t.id]
            st = m.statuses[t.status] if (m.statuses and t.status is not None) else str(j)
            sc = subtree_score(g, u, fp, pyr, (cx, cy))
            parts[m.part] = PartState(m.part, cell_box(tx, ty, t.size[0], t.size[1], pl, pyr),
                                      st, sc, u)
            boxes.append(parts[m.part].box)
            continue
        if m.kind == AND:
            queue.extend(m.children)
        else:
            queue.append(m.children[fp.choices[u]])
    if n.kind == AND and n.box is not None:
        car = cell_box(cx, cy, n.box[0], n.box[1], lam, pyr)
    elif boxes:
        x0 = min(b[0] for b in boxes)
        y0 = min(b[1] for b in boxes)
        x1 = max(b[0] + b[2] for b in boxes)
        y1 = max(b[1] + b[3] for b in boxes)
        car = (x0, y0, x1 - x0, y1 - y0)
    else:
        car = (0.0, 0.0, 0.0, 0.0)
    view = n.view if n.kind == AND else None
    ctype = n.car_type if n.kind == AND else None
    return FrameDescription(car, view, ctype, parts)


@dataclass
class Detection:
    tree: ParseTree
    score: float
    pair: int
    car_box: tuple
    frames: tuple[FrameDescription, FrameDescription]

    @property
    def view(self):
        return self.frames[0].view

    @property
    def car_type(self):
        return self.frames[0].car_type

    def to_json(self) -> dict:
        parts = []
        for f, fd in enumerate(self.frames):
            for name in sorted(fd.parts):
                ps = fd.parts[name]
                parts.append({"name": name, "frame": self.pair + f,
                              "box": [float(v) for v in ps.box],
                              "status": ps.status, "score": float(ps.score)})
        return {"pair": self.pair, "score": float(self.score),
                "car_box": [float(v) for v in self.car_box],
                "car_box_next": [float(v) for v in self.frames[1].car_box],
                "view": self.view, "type": self.car_type, "parts": parts}


@dataclass
class ProposalSet:
    """Per frame, per part: candidate (box, status, score) proposals."""
    frames: dict = field(default_factory=dict)  # frame -> part -> list[Proposal]

    def add(self, p: Proposal):
        self.frames.setdefault(p.frame, {}).setdefault(p.part, []).append(p)

    def sequence(self, part: str) -> list[list[Proposal]]:
        return [self.frames[f].get(part, []) for f in sorted(self.frames)]

    def parts(self) -> list[str]:
        names = set()
        for d in self.frames.values():
            names.update(d)
        return sorted(names)


def nms(boxes: np.ndarray, scores: np.ndarray, overlap: float, keep: int | None = None):
    """Greedy suppression in descending score order (stable on ties)."""
    order = np.argsort(-scores, kind="stable")
    kept = []
    for i in order:
        if keep is not None and len(kept) >= keep:
            break
        if all(box_overlap(boxes[i], boxes[k]) <= overlap for k in kept):
            kept.append(int(i))
    return kept


# ------------------------------------------------------------------- video


@dataclass
class DetectConfig:
    tau: float = 0.0
    nms_overlap: float = 0.65
    topk: int = 5
    stride: int = 3
    lbp: LBPConfig = field(default_factory=LBPConfig)
    car_iou: float = 0.7


def car_constraints(g: AOGraph, pyr: FeaturePyramid, box, min_iou: float) -> Constraints:
    """Restrict root cells to those whose car box overlaps ``box`` by ``min_iou``."""
    cons = Constraints()
    for c in g.nodes[g.root].children:
        n = g.nodes[c]
        if n.kind != AND or n.box is None:
            continue
        for lam in range(len(pyr)):
            W, H = pyr.dims(lam)
            k = pyr.cell_size / pyr.scales[lam]
            yy, xx = np.mgrid[0:H, 0:W]
            bw, bh = n.box[0] * k, n.box[1] * k
            iw = np.minimum(xx * k + bw, box[0] + box[2]) - np.maximum(xx * k, box[0])
            ih = np.minimum(yy * k + bh, box[1] + box[3]) - np.maximum(yy * k, box[1])
            inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
            iou = inter / (bw * bh + box[2] * box[3] - inter)
            cons.root_cells[(c, lam)] = iou >= min_iou
    return cons


def pair_window(g, feat0, feat1, flow, cfg: DetectConfig, cons0=None, cons1=None,
                scorers=(None, None)) -> WindowMaps:
    fm0 = frame_pass(g, feat0, cons0, scorers[0])
    fm1 = frame_pass(g, feat1, cons1, scorers[1])
    return st_window_score(g, temporal_couple(g, fm0, fm1, flow, cfg.lbp))


def detect_pair(g: AOGraph, feat0, feat1, flow, cfg: DetectConfig, pair: int = 0,
                car_boxes=(None, None)) -> list[Detection]:
    cons0 = car_constraints(g, feat0, car_boxes[0], cfg.car_iou) if car_boxes[0] is not None else None
    cons1 = car_constraints(g, feat1, car_boxes[1], cfg.car_iou) if car_boxes[1] is not None else None
    wm = pair_window(g, feat0, feat1, flow, cfg, cons0, cons1)
    return detections_from_window(g, wm, feat0, feat1, cfg, pair)


def _root_boxes(g, wm, lam, ys, xs, pyr):
    """Car boxes for candidate cells when the chosen branch declares a box."""
    root = g.nodes[g.root]
    out = np.zeros((ys.size, 4))
    ok = np.ones(ys.size, dtype=bool)
    k = pyr.cell_size / pyr.scales[lam]
    arg = wm.arg[lam][ys, xs]
    for j, c in enumerate(root.children):
        sel = arg == j
        n = g.nodes[c]
        if n.kind == AND and n.box is not None:
            out[sel] = np.stack([xs[sel] * k, ys[sel] * k,
                                 np.full(sel.sum(), n.box[0] * k),
                                 np.full(sel.sum(), n.box[1] * k)], axis=1)
        else:
            ok[sel] = False
    return out, ok


def detections_from_window(g, wm: WindowMaps, feat0, feat1, cfg: DetectConfig,
                           pair: int) -> list[Detection]:
    cands = []  # (score, level, y, x)
    boxes = []
    for lam in sorted(wm.values):
        v = wm.values[lam]
        ys, xs = np.nonzero(np.isfinite(v) & (v >= cfg.tau))
        if ys.size == 0:
            continue
        b, ok = _root_boxes(g, wm, lam, ys, xs, feat0)
        for i in np.flatnonzero(~ok):
            pt = retrieve_parse(g, wm, lam, (xs[i], ys[i]), pair)
            b[i] = describe_frame(g, pt.frames[0], feat0).car_box
        for i in range(ys.size):
            cands.append((float(v[ys[i], xs[i]]), lam, int(ys[i]), int(xs[i])))
        boxes.append(b)
    if not cands:
        return []
    boxes = np.concatenate(boxes)
    order = sorted(range(len(cands)), key=lambda i: (-cands[i][0], cands[i][1], cands[i][2], cands[i][3]))
    cands = [cands[i] for i in order]
    boxes = boxes[order]
    scores = np.array([c[0] for c in cands])
    kept = nms(boxes, scores, cfg.nms_overlap, cfg.topk)
    out = []
    for i in kept:
        sc, lam, y, x = cands[i]
        pt = retrieve_parse(g, wm, lam, (x, y), pair)
        d0 = describe_frame(g, pt.frames[0], feat0)
        d1 = describe_frame(g, pt.frames[1], feat1)
        out.append(Detection(pt, sc, pair, d0.car_box, (d0, d1)))
    return out


def pair_indices(n_frames: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, n_frames - 1, stride))


def _detect_job(args):
    g, f0, f1, fl, cfg, i, cb = args
    return detect_pair(g, f0, f1, fl, cfg, i, cb)


def detect(g: AOGraph, feats: Sequence[FeaturePyramid], flows: Sequence[FlowPyramid | None],
           cfg: DetectConfig | None = None, car_boxes: Sequence | None = None,
           workers: int = 1):
    """Detections for every processed pair plus the part proposal set.

    ``flows[i]`` maps frame i to i+1; ``car_boxes[f]`` (optional) restricts
    frame f to root cells overlapping the given pixel box.
    """
    cfg = cfg or DetectConfig()
    if not (0 < cfg.nms_overlap < 1) or cfg.topk < 1:
        raise ValueError("need 0 < nms_overlap < 1 and topk >= 1")
    pairs = pair_indices(len(feats), cfg.stride)
    jobs = []
    for i in pairs:
        cb = (None, None) if car_boxes is None else (car_boxes[i], car_boxes[i + 1])
        jobs.append((g, feats[i], feats[i + 1], flows[i] if flows is not None else None, cfg, i, cb))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_detect_job, jobs))
    else:
        results = [_detect_job(j) for j in jobs]
    per_pair = dict(zip(pairs, results))
    return per_pair, proposals_from(per_pair)


def proposals_from(per_pair: dict) -> ProposalSet:
    ps = ProposalSet()
    for i in sorted(per_pair):
        for f in (0, 1):
            ps.frames.setdefault(i + f, {})
        for det in per_pair[i]:
            for f, fd in enumerate(det.frames):
                for name, st in fd.parts.items():
                    ps.add(Proposal(i + f, tuple(st.box), st.status, st.score, name))
    return ps


def write_detections(per_pair: dict, path) -> None:
    with Path(path).open("w") as fh:
        for i in sorted(per_pair):
            for det in per_pair[i]:
                fh.write(json.dumps(det.to_json()) + "\n")


def read_proposals(path) -> ProposalSet:
    """Proposal set from a detections file written by :func:`write_detections`;
    frames of a pair without detections are kept (with no proposals)."""
    ps = ProposalSet()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            i = int(d["pair"])
            for f in (i, i + 1):
                ps.frames.setdefault(f, {})
            for p in d["parts"]:
                ps.add(Proposal(int(p["frame"]), tuple(float(v) for v in p["box"]), p["status"],
                                float(p["score"]), p["name"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}: line {n}: bad detection record ({e})") from e
    return ps
