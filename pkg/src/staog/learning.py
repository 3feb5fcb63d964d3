"""Latent structural SVM training of the car graph.

Outer loop (CCCP): complete the latent part of every positive parse graph
under the current weights, mine loss-augmented violators and hard
negatives into a cache, then solve the convex problem on the working set

    0.5*||w||^2 + C * sum_v max(0, max_k L_vk + <w, phi_vk - phi*_v>)
                + C * sum_n max(0, 1 + <w, phi_n>)

with a seeded projected subgradient method.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from sklearn.cluster import KMeans

from .data import FrameAnnotation, VideoAnnotation, is_light, vocabulary
from .graph import (AND, OR, TERMINAL, AOGraph, FrameParse, GraphBuilder, ParseGraph,
                    ParseTree, joint_feature, pack_weights, score_tree, tree_feature,
                    unpack_weights, weight_layout)
from .inference.detect import (DetectConfig, FrameDescription, detections_from_window, PartState, describe_frame, pair_indices,
                               retrieve_parse, st_window_score)
from .inference.dt import NEG_INF
from .inference.framepass import Constraints, FrameScorer, frame_pass
from .inference.temporal import LBPConfig, temporal_couple
from .pyramid import FeaturePyramid, build_pyramid, estimate_flow, flow_pyramid
from .tracking import box_overlap

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    C: float = 1.0
    ov: float = 0.5
    radius: int = 2
    outer: int = 5
    inner: int = 8  # cutting-plane rounds per outer iteration
    solver: str = "dual"  # or "subgradient": seeded steps 1/(lambda*t)
    epochs: int = 10000
    tol: float = 1e-7
    cache_capacity: int = 3000
    stride: int = 3
    seed: int = 7
    neg_per_pair: int = 3
    mine_topk: int = 5
    mine_margin: float = 1.0  # keep near-active constraints too
    eps_pos: float = 1e-4
    freeze_cache_after: int | None = None
    lbp: LBPConfig = field(default_factory=LBPConfig)
    workers: int = 1
    cell_size: int = 4
    max_levels: int | None = 1
    flow_radius: int = 1
    template_negatives: int = 40


# ------------------------------------------------------------------ samples


@dataclass
class TrainingSample:
    video_id: str
    annotation: VideoAnnotation | None  # None for car-free negative videos
    feats: dict  # frame -> FeaturePyramid (processed frames only)
    flows: dict  # pair start -> FlowPyramid
    pairs: list[int]

    def feat_list(self):
        n = max(self.feats) + 1
        return [self.feats.get(i) for i in range(n)]

    def flow_list(self):
        n = max(self.feats) + 1
        return [self.flows.get(i) for i in range(n)]


def make_sample(frames, ann: VideoAnnotation | None, stride: int = 3, cell_size: int = 4,
                max_levels: int | None = 1, flow_radius: int = 1,
                video_id: str | None = None) -> TrainingSample:
    """Pyramids for the frames of every processed pair, flow for each pair."""
    pairs = pair_indices(len(frames), stride)
    feats, flows = {}, {}
    for i in pairs:
        for f in (i, i + 1):
            if f not in feats:
                feats[f] = build_pyramid(frames[f], cell_size, max_levels=max_levels)
        f0 = estimate_flow(frames[i], frames[i + 1], cell_size, 1, flow_radius)
        flows[i] = flow_pyramid(f0, feats[i])
    vid = video_id or (ann.video_id if ann is not None else "negative")
    return TrainingSample(vid, ann, feats, flows, pairs)


# -------------------------------------------------------------- the model


def car_box_cells(cell_size: int = 4) -> tuple[int, int]:
    return 64 // cell_size, 32 // cell_size


def build_car_graph(geometry: dict, views: Sequence[tuple[int, int]] = ((0, 0),),
                    channels: int = 10, cell_size: int = 4,
                    deformation=(0.0, 0.1, 0.0, 0.1), temporal: float = 0.05,
                    templates: dict | None = None) -> AOGraph:
    """Root Or over single-car And-nodes (one per view x type), each with a
    body terminal and one Or-node per part over status terminals.

    ``geometry[(view, part)]`` lists ``(status index, (w, h), (ax, ay))`` in
    cells; ``templates`` maps ``(view, part, k)`` / ``(view, "body")`` to
    appearance arrays.
    """
    templates = templates or {}
    b = GraphBuilder(channels)
    bw, bh = car_box_cells(cell_size)
    cars = []
    for view, ctype in views:
        body_app = templates.get((view, "body"))
        body = b.terminal((bw, bh), body_app, deformation, 0, (0, 0), tag="body", part="body")
        kids = [body]
        part_names = sorted({p for (v, p) in geometry if v == view})
        for part in part_names:
            terms = []
            for k, (s, size, anchor) in enumerate(geometry[(view, part)]):
                app = templates.get((view, part, k))
                terms.append(b.terminal(size, app, deformation, 0, anchor,
                                        tag=f"{part}:{vocabulary(part)[s]}", part=part, status=s))
            p = b.or_(terms, [0.0] * len(terms), temporal, tag=part, part=part,
                      statuses=vocabulary(part))
            b.link(p)
            kids.append(p)
        a = b.and_(kids, 0.0, temporal, tag=f"car:{view}:{ctype}", box=(bw, bh),
                   view=view, car_type=ctype)
        b.link(a)
        cars.append(a)
    root = b.or_(cars, [0.0] * len(cars), tag="root")
    parts = sorted({p for (_, p) in geometry})
    return b.build(root, {"cell_size": cell_size, "parts": parts})


def choose_k(values: np.ndarray, max_k: int = 3, seed: int = 0) -> tuple[int, np.ndarray]:
    """Elbow rule on 1-D k-means inertia, capped at ``max_k``.

    k = 1 when the spread is below 10% of the mean; otherwise the smallest k
    whose inertia is at most 5% of the one-cluster inertia.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    n_unique = len(np.unique(x))
    if n_unique <= 1 or np.std(x) < 0.1 * abs(np.mean(x)):
        return 1, np.zeros(len(x), dtype=int)
    i1 = float(((x - x.mean()) ** 2).sum())
    best = None
    for k in range(2, min(max_k, n_unique) + 1):
        km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(x)
        best = (k, km.labels_)
        if km.inertia_ <= 0.05 * i1:
            break
    # relabel clusters by increasing centre for stable ordering
    k, lab = best
    centres = [x[lab == j].mean() for j in range(k)]
    order = np.argsort(centres)
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    return k, remap[lab]


def _cell(v, cell_size):
    return int(round(v / cell_size))


def _windows(pyr: FeaturePyramid, x, y, w, h):
    g = pyr.levels[0]
    H, W = g.shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        return None
    return g[y:y + h, x:x + w].ravel()


def train_linear_svm(X: np.ndarray, y: np.ndarray, C: float = 1.0, epochs: int = 2000,
                     seed: int = 0) -> tuple[np.ndarray, float]:
    """Binary hinge classifier (labels +-1) through the shared solver."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    terms = [HingeTerm(-(yi * xi)[None, :], np.array([1.0])) for xi, yi in zip(Xa, y)]
    w, _ = dual_solve(terms, Xa.shape[1], C, epochs, 1e-7, seed)
    return w[:-1], float(w[-1])


def init_templates(samples: Sequence[TrainingSample], parts: Sequence[str],
                   cfg: TrainConfig | None = None, channels: int | None = None) -> AOGraph:
    """Cluster annotated parts by status (and open ones by aspect ratio),
    train one linear template per cluster and wire them into the graph."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    cs = cfg.cell_size
    views = set()
    exemplars: dict = {}  # (view, part, status) -> list of (frame pyramid, box, car box)
    bodies: dict = {}
    for smp in samples:
        if smp.annotation is None:
            continue
        for f, pyr in sorted(smp.feats.items()):
            fa = smp.annotation.frames[f]
            views.add((fa.view, fa.car_type))
            bodies.setdefault(fa.view, []).append((pyr, fa.car_box))
            for p in fa.parts:
                if p.name not in parts:
                    continue
                s = vocabulary(p.name).index(p.status)
                exemplars.setdefault((fa.view, p.name, s), []).append((pyr, p.box, fa.car_box))
    if not views:
        raise TrainingError("no annotated samples")
    C = channels or next(iter(next(s for s in samples if s.feats).feats.values())).channels
    geometry, templates = {}, {}
    negs_pool = [pyr for smp in samples for pyr in smp.feats.values()]

    def fit(pos_list, w, h, avoid, shifted=()):
        X = [v for v in pos_list if v is not None]
        if not X:
            return None
        if len(X) == 1:
            x = X[0]
            n = np.linalg.norm(x)
            return (x / n if n > 0 else x).reshape(h, w, C)
        neg = []
        tries = 0
        while len(neg) < cfg.template_negatives and tries < 50 * cfg.template_negatives:
            tries += 1
            pyr = negs_pool[int(rng.integers(len(negs_pool)))]
            Wg, Hg = pyr.dims(0)
            if Wg < w or Hg < h:
                continue
            x, y = int(rng.integers(0, Wg - w + 1)), int(rng.integers(0, Hg - h + 1))
            box = (x * cs, y * cs, w * cs, h * cs)
            if any(box_overlap(box, a) > 0.3 for a in avoid):
                continue
            neg.append(pyr.levels[0][y:y + h, x:x + w].ravel())
        # windows around the car that miss the positive teach localization
        for pyr, b, car in shifted:
            x0, y0 = _cell(car[0], cs) - 2, _cell(car[1], cs) - 4
            x1, y1 = _cell(car[0] + car[2], cs) + 2, _cell(car[1] + car[3], cs) + 3
            cand = [(x, y) for y in range(y0, y1 - h + 1) for x in range(x0, x1 - w + 1)
                    if box_overlap((x * cs, y * cs, w * cs, h * cs), b) < 0.5]
            for k in rng.permutation(len(cand))[:cfg.template_negatives // 2]:
                v = _windows(pyr, cand[k][0], cand[k][1], w, h)
                if v is not None:
                    neg.append(v)
        Xs = np.array(X + neg)
        ys = np.array([1.0] * len(X) + [-1.0] * len(neg))
        wv, _ = train_linear_svm(Xs, ys, 1.0, cfg.epochs, cfg.seed)
        return wv.reshape(h, w, C)

    for view, ctype in sorted(views):
        bw, bh = car_box_cells(cs)
        pos = [_windows(pyr, _cell(b[0], cs), _cell(b[1], cs), bw, bh) for pyr, b in bodies[view]]
        templates[(view, "body")] = fit(pos, bw, bh, [b for _, b in bodies[view]], [(p, b, b) for p, b in bodies[view]])
        for part in parts:
            entries = []
            for s in range(len(vocabulary(part))):
                ex = exemplars.get((view, part, s), [])
                if not ex:
                    log.info("view %s part %s status %s: no exemplars, branch pruned",
                             view, part, vocabulary(part)[s])
                    continue
                if vocabulary(part)[s] == "open":
                    k, lab = choose_k([b[2] / b[3] for _, b, _ in ex], 3, cfg.seed)
                else:
                    k, lab = 1, np.zeros(len(ex), dtype=int)
                for j in range(k):
                    group = [e for e, l in zip(ex, lab) if l == j]
                    w = max(1, _cell(np.mean([b[2] for _, b, _ in group]), cs))
                    h = max(1, _cell(np.mean([b[3] for _, b, _ in group]), cs))
                    ax = _cell(np.mean([b[0] - c[0] for _, b, c in group]), cs)
                    ay = _cell(np.mean([b[1] - c[1] for _, b, c in group]), cs)
                    pos = [_windows(pyr, _cell(b[0], cs), _cell(b[1], cs), w, h)
                           for pyr, b, _ in group]
                    tmpl = fit(pos, w, h, [b for _, b, _ in group], group)
                    if tmpl is None:
                        continue
                    templates[(view, part, len(entries))] = tmpl
                    entries.append((s, (w, h), (ax, ay)))
            if entries:
                geometry[(view, part)] = entries
    g = build_car_graph(geometry, sorted(views), C, cs, templates=templates)
    for t in g.terminals:
        if not np.any(t.appearance):
            log.info("terminal %s has no template data", t.tag)
    return g


# -------------------------------------------------------------------- loss


def annotation_description(fa: FrameAnnotation) -> FrameDescription:
    return FrameDescription(tuple(fa.car_box), fa.view, fa.car_type,
                            {p.name: PartState(p.name, tuple(p.box), p.status, 0.0)
                             for p in fa.parts})


def frame_loss(pt, pt_hat, ov: float = 0.5) -> int:
    """0/1 loss between two labelings of a frame pair (or of one frame).

    Each argument is a FrameDescription or a sequence of them. Parts are
    compared when named in both labelings.
    """
    a = [pt] if isinstance(pt, FrameDescription) else list(pt)
    b = [pt_hat] if isinstance(pt_hat, FrameDescription) else list(pt_hat)
    if len(a) != len(b):
        raise ValueError("labelings cover different numbers of frames")
    for x, y in zip(a, b):
        if x.view != y.view or x.car_type != y.car_type:
            return 1
    for x, y in zip(a, b):
        if box_overlap(x.car_box, y.car_box) < ov:
            return 1
        for name in set(x.parts) & set(y.parts):
            if x.parts[name].status == "occluded" and y.parts[name].status == "occluded":
                continue
            if box_overlap(x.parts[name].box, y.parts[name].box) < ov:
                return 1
    for x, y in zip(a, b):
        for name in set(x.parts) & set(y.parts):
            if x.parts[name].status != y.parts[name].status:
                return 1
    return 0


def video_loss(pg: Sequence, pg_hat: Sequence, ov: float = 0.5) -> float:
    """Mean frame-pair loss; arguments are sequences of pair labelings."""
    if len(pg) != len(pg_hat):
        raise ValueError(f"parse graphs cover {len(pg)} and {len(pg_hat)} pairs")
    if not pg:
        raise ValueError("empty parse graph")
    return float(np.mean([frame_loss(a, b, ov) for a, b in zip(pg, pg_hat)]))


# ---------------------------------------------------- constrained inference


def _cell_boxes(pyr, level, w, h):
    """Pixel boxes of every top-left cell of a w x h window: arrays (H, W)."""
    W, H = pyr.dims(level)
    k = pyr.cell_size / pyr.scales[level]
    yy, xx = np.mgrid[0:H, 0:W]
    return xx * k, yy * k, w * k, h * k, k


def _iou_grid(pyr, level, w, h, box):
    x, y, bw, bh, _ = _cell_boxes(pyr, level, w, h)
    iw = np.minimum(x + bw, box[0] + box[2]) - np.maximum(x, box[0])
    ih = np.minimum(y + bh, box[1] + box[3]) - np.maximum(y, box[1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (bw * bh + box[2] * box[3] - inter)


def _near(pyr, level, box, radius):
    W, H = pyr.dims(level)
    k = pyr.cell_size / pyr.scales[level]
    yy, xx = np.mgrid[0:H, 0:W]
    return (np.abs(xx - round(box[0] / k)) <= radius) & (np.abs(yy - round(box[1] / k)) <= radius)


@dataclass
class FrameLabel:
    """Per-frame ok masks derived from an annotation."""
    branches: frozenset
    car: dict  # (and id, level) -> ok mask
    parts: dict  # (part name, terminal id, level) -> ok mask


def frame_label(g: AOGraph, pyr: FeaturePyramid, fa: FrameAnnotation, ov: float,
                radius: int | None) -> FrameLabel:
    root = g.nodes[g.root]
    ok_branches = set()
    car, parts = {}, {}
    ann_parts = {p.name: p for p in fa.parts}
    for j, a in enumerate(root.children):
        n = g.nodes[a]
        if n.kind != AND or n.view != fa.view or n.car_type != fa.car_type:
            continue
        ok_branches.add(j)
        for lam in range(len(pyr)):
            m = _iou_grid(pyr, lam, n.box[0], n.box[1], fa.car_box) >= ov
            if radius is not None:
                m &= _near(pyr, lam, fa.car_box, radius)
            car[(a, lam)] = m
        for c in n.children:
            cn = g.nodes[c]
            if cn.kind != OR or cn.part is None or cn.part not in ann_parts:
                continue
            pa = ann_parts[cn.part]
            for t in cn.children:
                tn = g.nodes[t]
                for pl in range(len(pyr)):
                    if tn.status is None or cn.statuses[tn.status] != pa.status:
                        parts[(cn.part, t, pl)] = np.zeros(pyr.levels[pl].shape[:2], bool)
                        continue
                    m = _iou_grid(pyr, pl, tn.size[0], tn.size[1], pa.box) >= ov
                    if pa.status == "occluded":
                        m = np.ones_like(m)
                    if radius is not None:
                        m &= _near(pyr, pl, pa.box, radius)
                    parts[(cn.part, t, pl)] = m
    return FrameLabel(frozenset(ok_branches), car, parts)


def ok_constraints(lab: FrameLabel) -> Constraints:
    c = Constraints(branches=lab.branches)
    c.root_cells.update(lab.car)
    for (_, t, pl), m in lab.parts.items():
        c.placements[(t, pl)] = m
    return c


def violation_constraints(g: AOGraph, lab: FrameLabel) -> dict:
    """One Constraints object per way of breaking the labeling in this frame."""
    out = {}
    for key, m in lab.car.items():
        out.setdefault("car", Constraints(branches=lab.branches)).root_cells[key] = ~m
    names = sorted({p for p, _, _ in lab.parts})
    for name in names:
        c = Constraints(branches=lab.branches)
        for (p, t, pl), m in lab.parts.items():
            if p == name:
                c.placements[(t, pl)] = ~m
        out[f"part:{name}"] = c
    return out


class PairSolver:
    """Frame-pair inference over one sample, caching responses and the
    unconstrained frame passes for the current weights."""

    def __init__(self, g: AOGraph, smp: TrainingSample, lbp: LBPConfig):
        self.g, self.smp, self.lbp = g, smp, lbp
        self.scorers = {f: FrameScorer(g, p) for f, p in smp.feats.items()}
        self._free = {}

    def frame(self, f, cons):
        if cons is None:
            if f not in self._free:
                self._free[f] = frame_pass(self.g, self.smp.feats[f], None, self.scorers[f])
            return self._free[f]
        return frame_pass(self.g, self.smp.feats[f], cons, self.scorers[f])

    def window(self, i, cons0=None, cons1=None):
        fm0 = self.frame(i, cons0)
        fm1 = self.frame(i + 1, cons1)
        cm = temporal_couple(self.g, fm0, fm1, self.smp.flows.get(i), self.lbp)
        return st_window_score(self.g, cm)

    def best(self, i, cons0=None, cons1=None):
        wm = self.window(i, cons0, cons1)
        sc, lam, x, y = wm.best()
        if not np.isfinite(sc):
            return NEG_INF, None
        return sc, retrieve_parse(self.g, wm, lam, (x, y), i)

    def describe(self, pt: ParseTree):
        return (describe_frame(self.g, pt.frames[0], self.smp.feats[pt.pair]),
                describe_frame(self.g, pt.frames[1], self.smp.feats[pt.pair + 1]))


def _labels(smp: TrainingSample, i):
    a = smp.annotation
    return annotation_description(a.frames[i]), annotation_description(a.frames[i + 1])


def annotation_parse(g: AOGraph, smp: TrainingSample, i: int) -> ParseTree:
    """Parse tree placed directly at the annotated cells (fallback labeling)."""
    root = g.nodes[g.root]
    frames = []
    choice = None
    for f in (i, i + 1):
        pyr = smp.feats[f]
        fa = smp.annotation.frames[f]
        cs = pyr.cell_size
        ann_parts = {p.name: p for p in fa.parts}
        if choice is None:
            choice = next((j for j, a in enumerate(root.children)
                           if g.nodes[a].kind == AND and g.nodes[a].view == fa.view
                           and g.nodes[a].car_type == fa.car_type), 0)
        a = root.children[choice]
        W, H = pyr.dims(0)
        fp = FrameParse()
        cx = min(max(_cell(fa.car_box[0], cs), 0), W - 1)
        cy = min(max(_cell(fa.car_box[1], cs), 0), H - 1)
        fp.placements[g.root] = (0, cx, cy)
        fp.choices[g.root] = choice
        queue = [a]
        while queue:
            u = queue.pop(0)
            n = g.nodes[u]
            if n.kind == TERMINAL:
                w, h = n.size
                if n.part in ann_parts and n.part != "body":
                    bx, by = ann_parts[n.part].box[:2]
                    x, y = _cell(bx, cs), _cell(by, cs)
                else:
                    x, y = cx + n.anchor[0], cy + n.anchor[1]
                fp.placements[u] = (0, min(max(x, 0), W - w), min(max(y, 0), H - h))
                continue
            fp.placements[u] = (0, cx, cy)
            if n.kind == AND:
                queue.extend(n.children)
            else:
                j = 0
                if n.part in ann_parts:
                    st = ann_parts[n.part].status
                    for k, t in enumerate(n.children):
                        tn = g.nodes[t]
                        if tn.status is not None and n.statuses[tn.status] == st:
                            j = k
                            break
                fp.choices[u] = j
                queue.append(n.children[j])
        frames.append(fp)
    pt = ParseTree(0, (frames[0], frames[1]), NEG_INF, i)
    pt.score = score_tree(g, pt, (smp.feats[i], smp.feats[i + 1]), smp.flows.get(i))
    return pt


def latent_relabel(g: AOGraph, smp: TrainingSample, radius: int | None, ov: float = 0.5,
                   lbp: LBPConfig | None = None, solver: PairSolver | None = None):
    """Best parse graph consistent with the annotation (views, statuses,
    IoU >= ov, within ``radius`` cells). Returns (ParseGraph, fallbacks)."""
    solver = solver or PairSolver(g, smp, lbp or LBPConfig())
    trees, fallbacks = [], 0
    for i in smp.pairs:
        c0 = ok_constraints(frame_label(g, smp.feats[i], smp.annotation.frames[i], ov, radius))
        c1 = ok_constraints(frame_label(g, smp.feats[i + 1], smp.annotation.frames[i + 1], ov, radius))
        sc, pt = solver.best(i, c0, c1)
        if pt is None:
            log.info("%s pair %d: no feasible latent placement, using annotation cells",
                     smp.video_id, i)
            pt = annotation_parse(g, smp, i)
            fallbacks += 1
        trees.append(pt)
    pg = ParseGraph(trees, float(np.mean([t.score for t in trees])))
    return pg, fallbacks


def loss_augmented_infer(g: AOGraph, smp: TrainingSample, ov: float = 0.5,
                         lbp: LBPConfig | None = None, solver: PairSolver | None = None,
                         collect: list | None = None, topk: int = 1):
    """argmax over parse graphs of S + L, pair by pair.

    Returns (ParseGraph, per-pair losses). The 0/1 pair loss splits the
    search into the labeling-consistent set and the union of single-
    violation sets; each piece is a constrained frame-pair inference. When
    ``collect`` is a list, every violation set is searched and its ``topk``
    best non-overlapping parses with loss 1 are appended as ``(pair, tree)``.
    """
    solver = solver or PairSolver(g, smp, lbp or LBPConfig())
    dcfg = DetectConfig(tau=-np.inf, topk=topk, nms_overlap=0.5)
    trees, losses = [], []
    for i in smp.pairs:
        ref = _labels(smp, i)
        fa = (smp.feats[i], smp.feats[i + 1])

        def search(c0=None, c1=None):
            wm = solver.window(i, c0, c1)
            if collect is None:
                sc, lam, x, y = wm.best()
                if not np.isfinite(sc):
                    return []
                pt = retrieve_parse(g, wm, lam, (x, y), i)
                return [(sc, pt, frame_loss(ref, solver.describe(pt), ov))]
            out = []
            for d in detections_from_window(g, wm, fa[0], fa[1], dcfg, i):
                out.append((d.score, d.tree, frame_loss(ref, d.frames, ov)))
            return out

        found = search()
        if not found:
            raise TrainingError(f"{smp.video_id} pair {i}: no parse at all")
        sc, pt, loss = found[0]
        if collect is not None:
            collect.extend((i, t) for _, t, l in found if l == 1)
        if loss == 0 or collect is not None:
            best_bad, bad_pt = NEG_INF, None
            labs = [frame_label(g, smp.feats[f], smp.annotation.frames[f], ov, None)
                    for f in (i, i + 1)]
            srcs = []
            wrong = frozenset(range(len(g.nodes[g.root].children))) - labs[0].branches
            if wrong:
                srcs.append((Constraints(branches=wrong), None))
            for f in (0, 1):
                for c in violation_constraints(g, labs[f]).values():
                    srcs.append((c, None) if f == 0 else (None, c))
            for c0, c1 in srcs:
                for s2, p2, l2 in search(c0, c1):
                    if l2 != 1:
                        continue
                    if collect is not None:
                        collect.append((i, p2))
                    if s2 > best_bad:
                        best_bad, bad_pt = s2, p2
            if loss == 0 and bad_pt is not None and best_bad + 1.0 > sc:
                pt, loss = bad_pt, 1
        trees.append(pt)
        losses.append(loss)
    pg = ParseGraph(trees, float(np.mean([t.score for t in trees])))
    return pg, losses


def pair_descriptions(g, smp, pg: ParseGraph):
    out = []
    for pt in pg.trees:
        out.append((describe_frame(g, pt.frames[0], smp.feats[pt.pair]),
                    describe_frame(g, pt.frames[1], smp.feats[pt.pair + 1])))
    return out


# ------------------------------------------------------------------ solver


@dataclass
class HingeTerm:
    """max(0, max_j c_j + A_j . w)."""
    A: np.ndarray
    c: np.ndarray

    def value(self, w) -> tuple[float, int]:
        v = self.c + self.A @ w
        j = int(np.argmax(v))
        return max(0.0, float(v[j])), (j if v[j] > 0 else -1)


def objective(w, terms: Sequence[HingeTerm], C: float) -> float:
    return 0.5 * float(w @ w) + C * sum(t.value(w)[0] for t in terms)


def subgradient(w, terms: Sequence[HingeTerm], C: float) -> np.ndarray:
    g = w.copy()
    for t in terms:
        _, j = t.value(w)
        if j >= 0:
            g += C * t.A[j]
    return g


def _project(w, lower):
    if lower is not None:
        idx, lo = lower
        w[idx] = np.maximum(w[idx], lo)
    return w


def pegasos(terms: Sequence[HingeTerm], dim: int, C: float, epochs: int, seed: int,
            w0=None, lower=None) -> tuple[np.ndarray, float]:
    """Seeded projected stochastic subgradient with step 1/(lambda*t),
    lambda = 1/(C*n). Returns the best iterate seen (the start point, each
    epoch's iterate and the running average all compete on the full
    objective), so the objective never increases from ``w0``."""
    w = np.zeros(dim) if w0 is None else np.array(w0, dtype=np.float64)
    w = _project(w, lower)
    best_w, best_j = w.copy(), objective(w, terms, C)
    n = len(terms)
    if n == 0:
        z = _project(np.zeros(dim), lower)
        jz = objective(z, terms, C)
        return (z, jz) if jz <= best_j else (best_w, best_j)
    for A in (t.A for t in terms):
        if not np.all(np.isfinite(A)):
            raise ValueError("non-finite features in hinge term")
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    avg = np.zeros(dim)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            _, j = terms[i].value(w)
            w *= (1.0 - eta * lam)
            if j >= 0:
                w -= eta * terms[i].A[j]
            w = _project(w, lower)
            avg += (w - avg) / t
        for cand in (w, _project(avg.copy(), lower)):
            jc = objective(cand, terms, C)
            if jc < best_j:
                best_w, best_j = cand.copy(), jc
    return best_w, best_j


@njit(cache=True)
def _smo(G, b, rows, ptr, M, C, epochs, tol):
    """Pairwise ascent on the dual of
    0.5*||w||^2 + C * sum_groups max(0, max_r b_r + B_r . w),  w[j] >= b_j,

    with ``G = B B^T``. The first ``M`` dual variables are the hinge rows,
    grouped through ``rows[ptr[g]:ptr[g+1]]`` and capped by ``C`` per group
    (the unused part of the cap acts as an extra row with gradient 0); the
    rest belong to the lower bounds. Returns (beta, sweeps run)."""
    n = G.shape[0]
    ng = ptr.size - 1
    beta = np.zeros(n)
    grad = b.copy()
    slack = np.full(ng, C)
    ep = 0
    while ep < epochs:
        ep += 1
        worst = 0.0
        for i in range(M, n):
            if G[i, i] <= 0.0:
                continue
            new = max(beta[i] + grad[i] / G[i, i], 0.0)
            d = new - beta[i]
            if d != 0.0:
                worst = max(worst, abs(grad[i]) if beta[i] > 0.0 else grad[i])
                beta[i] = new
                grad -= d * G[:, i]
        for g in range(ng):
            for _ in range(8 * (ptr[g + 1] - ptr[g]) + 8):
                # most promising row to grow, most hurtful row to shrink (-1 is the slack)
                up, gu = -1, 0.0
                dn, gd = -1, np.inf
                if slack[g] > 0.0:
                    gd = 0.0
                for k in range(ptr[g], ptr[g + 1]):
                    r = rows[k]
                    if grad[r] > gu:
                        up, gu = r, grad[r]
                    if beta[r] > 0.0 and grad[r] < gd:
                        dn, gd = r, grad[r]
                viol = gu - gd
                if viol > worst:
                    worst = viol
                if viol <= tol or up == dn:
                    break
                q = 0.0
                if up >= 0:
                    q += G[up, up]
                if dn >= 0:
                    q += G[dn, dn]
                if up >= 0 and dn >= 0:
                    q -= 2.0 * G[up, dn]
                avail = slack[g] if dn < 0 else beta[dn]
                d = avail if q <= 1e-15 else min(viol / q, avail)
                if d <= 0.0:
                    break
                if up >= 0:
                    beta[up] += d
                    grad -= d * G[:, up]
                else:
                    slack[g] += d
                if dn >= 0:
                    beta[dn] -= d
                    if beta[dn] < 1e-300:
                        beta[dn] = 0.0
                    grad += d * G[:, dn]
                else:
                    slack[g] -= d
                    if slack[g] < 0.0:
                        slack[g] = 0.0
        if worst <= tol:
            break
    return beta, ep


def dual_solve(terms: Sequence[HingeTerm], dim: int, C: float, epochs: int = 2000,
               tol: float = 1e-7, seed: int = 0, w0=None, lower=None):
    """Exact working-set solve by pairwise dual ascent (deterministic; ``seed``
    is accepted for interface parity with the subgradient solver).

    ``w0`` only competes at the end (step acceptance); returns (w, objective).
    """
    if terms:
        A = np.ascontiguousarray(np.vstack([t.A for t in terms]), dtype=np.float64)
        c = np.concatenate([t.c for t in terms]).astype(np.float64)
        sizes = np.array([len(t.c) for t in terms], dtype=np.int64)
    else:
        A, c, sizes = np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=np.int64)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite features in hinge term")
    if lower is None:
        lo_idx, lo_val = np.zeros(0, dtype=np.int64), np.zeros(0)
    else:
        lo_idx = np.asarray(lower[0], dtype=np.int64)
        lo_val = np.broadcast_to(np.asarray(lower[1], dtype=np.float64), lo_idx.shape).copy()
    M, K = len(c), len(lo_idx)
    # dual rows: -A_r for hinges, e_j for bounds, so that w = B^T beta
    B = np.zeros((M + K, dim))
    B[:M] = -A
    B[M + np.arange(K), lo_idx] = 1.0
    G = B @ B.T
    b = np.concatenate([c, lo_val])
    ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    beta, _ = _smo(G, b, np.arange(M, dtype=np.int64), ptr, M, float(C),
                   int(epochs), float(tol))
    w = _project(B.T @ beta, lower)
    j = objective(w, terms, C)
    if w0 is not None:
        w0 = _project(np.array(w0, dtype=np.float64), lower)
        j0 = objective(w0, terms, C)
        if j0 < j:
            return w0, j0
    return w, j


def solve_working_set(terms, dim, C, cfg: "TrainConfig", seed, w0=None, lower=None):
    if cfg.solver == "subgradient":
        return pegasos(terms, dim, C, cfg.epochs, seed, w0, lower)
    if cfg.solver == "dual":
        return dual_solve(terms, dim, C, cfg.epochs, cfg.tol, seed, w0, lower)
    raise ValueError(f"unknown solver {cfg.solver!r}")


def positive_bounds(g: AOGraph, eps: float):
    lay = weight_layout(g)
    idx = []
    for t in g.terminals:
        s = lay.deformation[t.id]
        idx.extend([s.start + 1, s.start + 3])
    idx.extend(lay.temporal.values())
    return np.array(sorted(idx), dtype=np.int64), eps


def ssvm_step(w, positives: Sequence[np.ndarray], violators: Sequence[Sequence[tuple]],
              C: float, cfg: TrainConfig | None = None, seed: int = 0, lower=None,
              negatives: Sequence[np.ndarray] = ()):
    """One convex solve: ``violators[v]`` lists (phi_hat, loss) for positive v.

    Returns (new weights, objective, hinge terms)."""
    cfg = cfg or TrainConfig()
    terms = []
    for phi, vs in zip(positives, violators):
        if len(vs):
            A = np.stack([p - phi for p, _ in vs])
            c = np.array([l for _, l in vs], dtype=np.float64)
            terms.append(HingeTerm(A, c))
    for phi in negatives:
        terms.append(HingeTerm(phi[None, :], np.array([1.0])))
    w2, obj = solve_working_set(terms, len(w), C, cfg, seed, w, lower)
    return w2, obj, terms


# ------------------------------------------------------------------ cache


@dataclass
class NegativeCache:
    """Bounded pool of hard violators, keyed by sample; keeps the largest
    margin violations when full."""
    capacity: int = 4000
    positives: dict = field(default_factory=dict)  # vid -> list of (phi, loss, key)
    negatives: list = field(default_factory=list)  # (phi, key)

    def __len__(self):
        return sum(len(v) for v in self.positives.values()) + len(self.negatives)

    def add_violator(self, vid, phi, loss, key) -> bool:
        lst = self.positives.setdefault(vid, [])
        if any(k == key for _, _, k in lst):
            return False
        lst.append((phi, loss, key))
        return True

    def add_negative(self, phi, key) -> bool:
        if any(k == key for _, k in self.negatives):
            return False
        self.negatives.append((phi, key))
        return True

    def shrink(self, w, phis: dict):
        """Drop the least violating entries beyond capacity."""
        excess = len(self) - self.capacity
        if excess <= 0:
            return
        scored = []
        for vid, lst in self.positives.items():
            for k, (phi, loss, key) in enumerate(lst):
                scored.append((loss + float(w @ (phi - phis[vid])), 0, vid, k))
        for k, (phi, key) in enumerate(self.negatives):
            scored.append((1.0 + float(w @ phi), 1, None, k))
        scored.sort(key=lambda s: (s[0], s[1], str(s[2]), s[3]))
        drop = scored[:excess]
        dp = {}
        dn = set()
        for _, kind, vid, k in drop:
            if kind == 0:
                dp.setdefault(vid, set()).add(k)
            else:
                dn.add(k)
        for vid, ks in dp.items():
            self.positives[vid] = [e for k, e in enumerate(self.positives[vid]) if k not in ks]
        self.negatives = [e for k, e in enumerate(self.negatives) if k not in dn]


def _key(pg: ParseGraph):
    out = []
    for pt in pg.trees:
        for fp in pt.frames:
            out.append(tuple(sorted(fp.placements.items())))
            out.append(tuple(sorted(fp.choices.items())))
    return tuple(out)


# ----------------------------------------------------------------- training


def _mine_video(args):
    g, smp, cfg, relabel, topk = args
    solver = PairSolver(g, smp, cfg.lbp)
    if smp.annotation is None:
        dcfg = DetectConfig(tau=-1.0, topk=cfg.neg_per_pair, lbp=cfg.lbp)
        out = []
        for i in smp.pairs:
            wm = solver.window(i)
            for det in detections_from_window(g, wm, smp.feats[i], smp.feats[i + 1], dcfg, i):
                out.append((i, det.tree))
        return ("neg", out)
    pg = fb = None
    if relabel:
        pg, fb = latent_relabel(g, smp, cfg.radius, cfg.ov, cfg.lbp, solver)
    if topk == 0:
        return ("pos", (pg, fb, None, None, []))
    extra: list = [] if topk > 1 else None
    hat, losses = loss_augmented_infer(g, smp, cfg.ov, cfg.lbp, solver, extra, topk)
    return ("pos", (pg, fb, hat, losses, extra or []))


def _terms(phis, cache):
    terms = []
    for vid in sorted(phis):
        vs = cache.positives.get(vid, [])
        if vs:
            terms.append(HingeTerm(np.stack([p - phis[vid] for p, _, _ in vs]),
                                   np.array([l for _, l, _ in vs])))
    for phi, _ in cache.negatives:
        terms.append(HingeTerm(phi[None, :], np.array([1.0])))
    return terms


def surrogate_objective(w, phis: dict, cache: NegativeCache, C: float) -> float:
    return objective(w, _terms(phis, cache), C)


def _run_jobs(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_mine_video, jobs))
    return [_mine_video(j) for j in jobs]


def train(g: AOGraph, samples: Sequence[TrainingSample], cfg: TrainConfig | None = None,
          negatives: Sequence[TrainingSample] = (), log_path=None,
          cache: NegativeCache | None = None) -> tuple[AOGraph, list]:
    """CCCP training; returns the trained graph and one log row per outer
    iteration (iter, objective, violations, cache_size).

    Each outer iteration completes the latent parts of every positive with
    the current weights, then alternates violator mining and working-set
    solves until no violator is left or ``cfg.inner`` rounds have run.
    """
    cfg = cfg or TrainConfig()
    g = g.copy()
    if cache is None:
        cache = NegativeCache(cfg.cache_capacity)
    lower = positive_bounds(g, cfg.eps_pos)
    w = _project(pack_weights(g), lower)
    unpack_weights(g, w)
    rows = []
    relabeled: dict = {}
    phis: dict = {}
    pos = [s for s in samples if s.annotation is not None]
    for it in range(cfg.outer):
        frozen = cfg.freeze_cache_after is not None and it >= cfg.freeze_cache_after
        changed = False
        first_violations = None
        obj = surrogate_objective(w, phis, cache, cfg.C) if phis else float("nan")
        for inner in range(max(1, cfg.inner)):
            relabel = inner == 0
            if frozen and not relabel:
                break
            topk = 0 if frozen else cfg.mine_topk
            jobs = [(g, s, cfg, relabel, topk) for s in pos]
            if not frozen:
                jobs += [(g, s, cfg, relabel, topk) for s in negatives]
            results = _run_jobs(jobs, cfg.workers)
            violations = 0
            for (kind, res), (_, smp, _, _, _) in zip(results, jobs):
                feats, flows = smp.feat_list(), smp.flow_list()
                if kind == "neg":
                    for i, pt in res:
                        phi = tree_feature(g, pt, (smp.feats[i], smp.feats[i + 1]), smp.flows.get(i))
                        if 1.0 + float(w @ phi) > -1e-12:
                            violations += 1
                        if not frozen:
                            cache.add_negative(phi, (smp.video_id,) + _key(ParseGraph([pt])))
                    continue
                pg, fb, hat, losses, extra = res
                if relabel:
                    phi_new = joint_feature(g, pg, feats, flows)
                    if smp.video_id in relabeled:
                        # keep the previous completion unless the new one scores at least as high
                        old = relabeled[smp.video_id]
                        phi_old = joint_feature(g, old, feats, flows)
                        if float(w @ phi_new) < float(w @ phi_old):
                            pg, phi_new = old, phi_old
                        if _key(pg) != _key(old):
                            changed = True
                    else:
                        changed = True
                    relabeled[smp.video_id] = pg
                    phis[smp.video_id] = phi_new
                pg, phi_new = relabeled[smp.video_id], phis[smp.video_id]
                if hat is None:
                    continue
                L = float(np.mean(losses))
                phi_hat = joint_feature(g, hat, feats, flows)
                margin = L + float(w @ (phi_hat - phi_new))
                if L > 0 and margin > 1e-9:
                    violations += 1
                if frozen:
                    continue
                if L > 0 and margin > -cfg.mine_margin:
                    cache.add_violator(smp.video_id, phi_hat, L, _key(hat))
                # single-pair swaps of the completed positive
                n = len(pg.trees)
                pos_of = {pt.pair: k for k, pt in enumerate(pg.trees)}
                for i, pt in extra:
                    k = pos_of[i]
                    ref = pg.trees[k]
                    fa = (smp.feats[i], smp.feats[i + 1])
                    d = (tree_feature(g, pt, fa, smp.flows.get(i))
                         - tree_feature(g, ref, fa, smp.flows.get(i))) / n
                    if 1.0 / n + float(w @ d) > -cfg.mine_margin:
                        trees = list(pg.trees)
                        trees[k] = pt
                        cache.add_violator(smp.video_id, phi_new + d, 1.0 / n,
                                           _key(ParseGraph(trees)))
            if frozen:
                violations = sum(int(np.max(t.c + t.A @ w) > 1e-9) for t in _terms(phis, cache))
            if first_violations is None:
                first_violations = violations
            if inner > 0 and violations == 0:
                break
            if not frozen:
                cache.shrink(w, phis)
            w, obj = solve_working_set(_terms(phis, cache), len(w), cfg.C, cfg,
                                       cfg.seed + 1000 * it + inner, w, lower)
            if not np.all(np.isfinite(w)) or np.linalg.norm(w) > 1e6:
                raise TrainingError(f"weights diverged at iteration {it}: norm {np.linalg.norm(w):.3g}")
            unpack_weights(g, w)
            log.debug("iter %d.%d objective %.6f violations %d cache %d",
                      it, inner, obj, violations, len(cache))
        rows.append((it, obj, first_violations, len(cache)))
        log.info("iter %d objective %.6f violations %d cache %d", it, obj, first_violations, len(cache))
        if it > 0 and not changed and first_violations == 0:
            break
    if log_path is not None:
        write_log(rows, log_path)
    return g, rows


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "objective", "violations", "cache_size"])
        for r in rows:
            wr.writerow([r[0], repr(float(r[1])), r[2], r[3]])


# --------------------------------------------------------------- evaluation


def predict_frames(g: AOGraph, smp: TrainingSample, given_car: bool = True,
                   lbp: LBPConfig | None = None, car_iou: float = 0.7) -> dict:
    """Top detection per processed pair, as ``{frame: {part: (box, status)}}``.

    With ``given_car`` the root cells are restricted to the annotated car box.
    """
    from .inference.detect import DetectConfig, detect
    cfg = DetectConfig(tau=-np.inf, topk=1, lbp=lbp or LBPConfig(), car_iou=car_iou)
    boxes = None
    if given_car:
        boxes = [tuple(fa.car_box) for fa in smp.annotation.frames]
    per_pair, _ = detect(g, smp.feat_list(), smp.flow_list(), cfg, boxes)
    out = {}
    for i, dets in per_pair.items():
        if not dets:
            continue
        for f, fd in enumerate(dets[0].frames):
            out[i + f] = {n: (ps.box, ps.status) for n, ps in fd.parts.items()}
    return out
