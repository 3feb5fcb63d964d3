"""Spatial-temporal And-Or graph: structure, parameters and the joint
feature map.

Non-terminal nodes share the placement cell of the root; terminals are
placed relative to their parent with a quadratic deformation cost. A frame
pair is scored as

    root-branch bias + subtree(frame i) + subtree(frame i+1)
        - sum over linked nodes of  theta * ||l - l' + F(l)||^2

where ``F`` is the (rounded) flow of frame i and the linked nodes are the
members of ``AOGraph.temporal``. A video score is the mean of its pair
scores. Every score is the dot product of :func:`pack_weights` with
:func:`joint_feature`.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LAYOUT_VERSION = 1

OR = "or"
AND = "and"
TERMINAL = "terminal"


@dataclass(eq=False)
class TerminalNode:
    id: int
    size: tuple[int, int]  # (w, h) in cells
    appearance: np.ndarray  # (h, w, C)
    deformation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.1, 0.0, 0.1]))
    scale_factor: int = 0
    anchor: tuple[int, int] = (0, 0)
    tag: str = ""
    part: str | None = None
    status: int | None = None

    kind = TERMINAL

    def __post_init__(self):
        self.size = (int(self.size[0]), int(self.size[1]))
        self.anchor = (int(self.anchor[0]), int(self.anchor[1]))
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        self.deformation = np.asarray(self.deformation, dtype=np.float64).reshape(4)

    @property
    def children(self) -> tuple:
        return ()


@dataclass(eq=False)
class AndNode:
    id: int
    children: list[int]
    bias: float = 0.0
    temporal_weight: float = 0.0
    tag: str = ""
    box: tuple[int, int] | None = None  # (w, h) cells; set on single-car nodes
    view: int | None = None
    car_type: int | None = None

    kind = AND


@dataclass(eq=False)
class OrNode:
    id: int
    children: list[int]
    child_bias: list[float] | None = None
    temporal_weight: float = 0.0
    tag: str = ""
    part: str | None = None
    statuses: tuple[str, ...] | None = None

    kind = OR

    def __post_init__(self):
        if self.child_bias is None:
            self.child_bias = [0.0] * len(self.children)
        self.child_bias = [float(b) for b in self.child_bias]


Node = TerminalNode | AndNode | OrNode


@dataclass(eq=False)
class AOGraph:
    nodes: list
    root: int
    temporal: list[int] = field(default_factory=list)
    channels: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.temporal = sorted(set(int(t) for t in self.temporal))

    def __getitem__(self, i: int):
        return self.nodes[i]

    def __len__(self):
        return len(self.nodes)

    @property
    def terminals(self) -> list[TerminalNode]:
        return [n for n in self.nodes if n.kind == TERMINAL]

    def parents(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for c in n.children:
                if c in out:
                    out[c].append(n.id)
        return out

    def dfs_order(self) -> list[int]:
        """Post-order over nodes reachable from the root (children first)."""
        seen, order = set(), []

        def visit(v):
            if v in seen:
                return
            seen.add(v)
            for c in self.nodes[v].children:
                visit(c)
            order.append(v)

        visit(self.root)
        return order

    def is_temporal(self, v: int) -> bool:
        return v in self.temporal

    def copy(self) -> "AOGraph":
        return from_dict(to_dict(self))


# ------------------------------------------------------------------ builder

class GraphBuilder:
    """Incremental construction with dense ids."""

    def __init__(self, channels: int = 10):
        self.nodes: list = []
        self.channels = channels
        self.temporal: list[int] = []

    def terminal(self, size, appearance=None, deformation=(0.0, 0.1, 0.0, 0.1),
                 scale_factor=0, anchor=(0, 0), **kw) -> int:
        w, h = size
        if appearance is None:
            appearance = np.zeros((h, w, self.channels))
        n = TerminalNode(len(self.nodes), (w, h), appearance, np.asarray(deformation, float),
                         scale_factor, anchor, **kw)
        self.nodes.append(n)
        return n.id

    def and_(self, children, bias=0.0, temporal_weight=0.0, **kw) -> int:
        n = AndNode(len(self.nodes), list(children), bias, temporal_weight, **kw)
        self.nodes.append(n)
        return n.id

    def or_(self, children, child_bias=None, temporal_weight=0.0, **kw) -> int:
        n = OrNode(len(self.nodes), list(children), child_bias, temporal_weight, **kw)
        self.nodes.append(n)
        return n.id

    def link(self, *ids: int):
        self.temporal.extend(ids)

    def build(self, root: int, meta=None) -> AOGraph:
        return AOGraph(self.nodes, root, self.temporal, self.channels, dict(meta or {}))


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    node: int
    rule: str
    detail: str = ""


def validate_graph(g: AOGraph) -> list[Violation]:
    """All structural rule violations; empty when the graph is well formed."""
    out: list[Violation] = []
    n = len(g.nodes)
    for i, node in enumerate(g.nodes):
        if node.id != i:
            out.append(Violation(i, "dense-ids", f"node at index {i} has id {node.id}"))
    ids = set(range(n))
    for node in g.nodes:
        for c in node.children:
            if c not in ids:
                out.append(Violation(node.id, "missing-child", f"child {c} does not exist"))
        if node.kind in (AND, OR) and len(node.children) == 0:
            out.append(Violation(node.id, "no-children", f"{node.kind}-node without children"))
        if node.kind == OR and len(node.child_bias) != len(node.children):
            out.append(Violation(node.id, "bias-length", "child_bias length differs from children"))
        if node.kind == TERMINAL:
            w, h = node.size
            if w < 1 or h < 1:
                out.append(Violation(node.id, "template-size", f"size {node.size}"))
            elif node.appearance.shape != (h, w, g.channels):
                out.append(Violation(node.id, "template-shape",
                                     f"appearance {node.appearance.shape} != {(h, w, g.channels)}"))
            if node.deformation[1] < 0 or node.deformation[3] < 0:
                out.append(Violation(node.id, "deformation-sign", "quadratic weights must be >= 0"))
            if node.scale_factor not in (0, 1):
                out.append(Violation(node.id, "scale-factor", f"{node.scale_factor}"))
    if g.root not in ids:
        out.append(Violation(g.root, "root", "root id does not exist"))
        return out
    if g.nodes[g.root].kind != OR:
        out.append(Violation(g.root, "root", "root must be an Or-node"))

    def kids(v):
        return [c for c in g.nodes[v].children if c in ids]

    # cycle detection: iterative DFS with colours, one violation per back edge
    color = [0] * n
    for start in range(n):
        if color[start]:
            continue
        stack = [(start, iter(kids(start)))]
        color[start] = 1
        while stack:
            v, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[v] = 2
                stack.pop()
            elif color[nxt] == 1:
                out.append(Violation(v, "cycle", f"edge {v}->{nxt} closes a cycle"))
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(kids(nxt))))

    parents = {i: 0 for i in ids}
    for node in g.nodes:
        for c in kids(node.id):
            parents[c] += 1
    for i in ids:
        if i != g.root and parents[i] == 0:
            out.append(Violation(i, "orphan", "non-root node without a spatial parent"))

    for t in g.temporal:
        if t not in ids:
            out.append(Violation(t, "temporal-missing", f"temporal id {t} does not exist"))
        elif g.nodes[t].kind == TERMINAL:
            out.append(Violation(t, "temporal-kind", "temporal links live on And/Or nodes"))
        else:
            if g.nodes[t].temporal_weight < 0:
                out.append(Violation(t, "temporal-sign", "temporal weight must be >= 0"))
            if g.nodes[t].kind == OR:
                ch = kids(t)
                if any(g.nodes[c].kind != TERMINAL for c in ch):
                    out.append(Violation(t, "temporal-or", "linked Or-nodes must select terminals"))
                elif len({g.nodes[c].scale_factor for c in ch}) > 1:
                    out.append(Violation(t, "temporal-or", "linked Or-node terminals mix scale factors"))

    if not any(v.rule == "cycle" for v in out):
        desc: dict[int, frozenset] = {}

        def descendants(v):
            if v not in desc:
                s = {v}
                for c in kids(v):
                    s |= descendants(c)
                desc[v] = frozenset(s)
            return desc[v]

        for node in g.nodes:
            if node.kind == AND:
                seen: set = set()
                for c in kids(node.id):
                    d = descendants(c)
                    if seen & d:
                        out.append(Violation(node.id, "and-overlap",
                                             "children of an And-node share descendants"))
                        break
                    seen |= d
    return out


# ------------------------------------------------------------------ features

def deformation_feature(dx, dy) -> np.ndarray:
    return np.array([dx, dx * dx, dy, dy * dy], dtype=np.float64)


def temporal_feature(l, l_next, flow_at_l) -> float:
    """Squared residual ``||l - l_next + F(l)||^2`` (a penalty magnitude)."""
    d0 = l[0] - l_next[0] + flow_at_l[0]
    d1 = l[1] - l_next[1] + flow_at_l[1]
    return float(d0 * d0 + d1 * d1)


def terminal_target(t: TerminalNode, parent_xy) -> tuple[int, int]:
    m = 2 if t.scale_factor == 1 else 1
    return parent_xy[0] * m + t.anchor[0], parent_xy[1] * m + t.anchor[1]


# -------------------------------------------------------------------- layout

@dataclass
class Layout:
    appearance: dict[int, slice]
    deformation: dict[int, slice]
    temporal: dict[int, int]
    bias: dict[tuple[int, int], int]
    size: int


def weight_layout(g: AOGraph) -> Layout:
    """Fixed order: terminals by id (appearance then deformation), temporal
    weights by id, then biases by (node id, child index)."""
    pos = 0
    app, dfm, tmp, bias = {}, {}, {}, {}
    for n in g.nodes:
        if n.kind == TERMINAL:
            k = n.appearance.size
            app[n.id] = slice(pos, pos + k)
            pos += k
            dfm[n.id] = slice(pos, pos + 4)
            pos += 4
    for t in g.temporal:
        tmp[t] = pos
        pos += 1
    for n in g.nodes:
        if n.kind == AND:
            bias[(n.id, 0)] = pos
            pos += 1
        elif n.kind == OR:
            for j in range(len(n.children)):
                bias[(n.id, j)] = pos
                pos += 1
    return Layout(app, dfm, tmp, bias, pos)


def pack_weights(g: AOGraph) -> np.ndarray:
    lay = weight_layout(g)
    v = np.zeros(lay.size)
    for t in g.terminals:
        v[lay.appearance[t.id]] = t.appearance.ravel()
        v[lay.deformation[t.id]] = t.deformation
    for t, i in lay.temporal.items():
        v[i] = g.nodes[t].temporal_weight
    for (nid, j), i in lay.bias.items():
        n = g.nodes[nid]
        v[i] = n.bias if n.kind == AND else n.child_bias[j]
    return v


def unpack_weights(g: AOGraph, v) -> AOGraph:
    """Write a flat weight vector into the graph's nodes (in place)."""
    v = np.asarray(v, dtype=np.float64)
    lay = weight_layout(g)
    if v.shape != (lay.size,):
        raise ValueError(f"weight vector has length {v.size}, layout needs {lay.size}")
    for t in g.terminals:
        t.appearance = v[lay.appearance[t.id]].reshape(t.appearance.shape).copy()
        t.deformation = v[lay.deformation[t.id]].copy()
    for t, i in lay.temporal.items():
        g.nodes[t].temporal_weight = float(v[i])
    for (nid, j), i in lay.bias.items():
        n = g.nodes[nid]
        if n.kind == AND:
            n.bias = float(v[i])
        else:
            n.child_bias[j] = float(v[i])
    return g


# --------------------------------------------------------------- parse trees

@dataclass
class FrameParse:
    """Placements and Or choices of one frame of a parse tree.

    ``placements`` maps node id to ``(level, x, y)``: the shared root cell
    for non-terminals and the top-left cell for terminals.
    """
    placements: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    choices: dict[int, int] = field(default_factory=dict)


@dataclass
class ParseTree:
    level: int
    frames: tuple[FrameParse, FrameParse]
    score: float = float("nan")
    pair: int = 0

    def selected(self, g: AOGraph, f: int) -> list[int]:
        """Node ids on the selected subtree in frame ``f`` (BFS order)."""
        fp = self.frames[f]
        out, queue = [], [g.root]
        while queue:
            v = queue.pop(0)
            out.append(v)
            n = g.nodes[v]
            if n.kind == OR:
                queue.append(n.children[fp.choices[v]])
            elif n.kind == AND:
                queue.extend(n.children)
        return out


@dataclass
class ParseGraph:
    trees: list[ParseTree]
    score: float = float("nan")

    def __len__(self):
        return len(self.trees)


def _flow_at(flows, level: int, x: int, y: int) -> np.ndarray:
    if flows is None:
        return np.zeros(2)
    f = flows.levels[level]
    h, w = f.shape[:2]
    xi = min(max(x, 0), w - 1)
    yi = min(max(y, 0), h - 1)
    return np.rint(f[yi, xi])


def _linked_position(g: AOGraph, fp: FrameParse, v: int):
    n = g.nodes[v]
    if n.kind == OR:
        c = n.children[fp.choices[v]]
        return fp.placements[c]
    return fp.placements[v]


def _check_root_choice(pt: ParseTree, g: AOGraph):
    a = pt.frames[0].choices.get(g.root)
    b = pt.frames[1].choices.get(g.root)
    if a is None or a != b:
        raise ValueError("a parse tree must select the same root branch in both frames")
    return a


def score_tree(g: AOGraph, pt: ParseTree, feats: Sequence, flow=None) -> float:
    """Recursive evaluation of a frame-pair parse tree.

    ``feats`` holds the two frames' FeaturePyramids; ``flow`` is the
    FlowPyramid from frame i to frame i+1 (None means zero flow).
    """
    choice = _check_root_choice(pt, g)
    total = g.nodes[g.root].child_bias[choice]
    for f in (0, 1):
        fp = pt.frames[f]
        child = g.nodes[g.root].children[choice]
        total += _score_subtree(g, child, fp, feats[f], fp.placements[g.root][1:])
    for v in _linked_selected(g, pt):
        l0 = _linked_position(g, pt.frames[0], v)
        l1 = _linked_position(g, pt.frames[1], v)
        F = _flow_at(flow, l0[0], l0[1], l0[2])
        total -= g.nodes[v].temporal_weight * temporal_feature(l0[1:], l1[1:], F)
    return float(total)


def _linked_selected(g, pt) -> list[int]:
    """Linked nodes selected in both frames of the pair."""
    if not g.temporal:
        return []
    both = set(pt.selected(g, 0)) & set(pt.selected(g, 1))
    return [v for v in g.temporal if v in both]


def _score_subtree(g: AOGraph, v: int, fp: FrameParse, pyr, parent_xy) -> float:
    n = g.nodes[v]
    if n.kind == TERMINAL:
        lvl, x, y = fp.placements[v]
        w, h = n.size
        win = pyr.levels[lvl][y:y + h, x:x + w]
        if win.shape != n.appearance.shape:
            raise IndexError(f"terminal {v} placement ({lvl},{x},{y}) outside the pyramid")
        tx, ty = terminal_target(n, parent_xy)
        return float(np.dot(win.ravel(), n.appearance.ravel())
                     - np.dot(n.deformation, deformation_feature(x - tx, y - ty)))
    xy = fp.placements[v][1:]
    if n.kind == AND:
        s = n.bias
        for c in n.children:
            s += _score_subtree(g, c, fp, pyr, xy)
        return s
    j = fp.choices[v]
    return n.child_bias[j] + _score_subtree(g, n.children[j], fp, pyr, xy)


def subtree_score(g: AOGraph, v: int, fp: FrameParse, pyr, parent_xy) -> float:
    """Score of the subtree rooted at ``v`` in one frame (no temporal terms)."""
    return _score_subtree(g, v, fp, pyr, parent_xy)


def score_graph(g: AOGraph, pg: ParseGraph, feats: Sequence, flows: Sequence) -> float:
    """Video score: mean of frame-pair scores. ``feats``/``flows`` are
    indexed by absolute frame number."""
    if not pg.trees:
        raise ValueError("empty parse graph")
    vals = [score_tree(g, pt, (feats[pt.pair], feats[pt.pair + 1]),
                       flows[pt.pair] if flows is not None else None) for pt in pg.trees]
    return float(np.mean(vals))


def tree_feature(g: AOGraph, pt: ParseTree, feats: Sequence, flow=None,
                 layout: Layout | None = None) -> np.ndarray:
    lay = layout or weight_layout(g)
    phi = np.zeros(lay.size)
    choice = _check_root_choice(pt, g)
    phi[lay.bias[(g.root, choice)]] += 1.0
    for f in (0, 1):
        fp = pt.frames[f]
        child = g.nodes[g.root].children[choice]
        _feature_subtree(g, child, fp, feats[f], fp.placements[g.root][1:], phi, lay)
    for v in _linked_selected(g, pt):
        l0 = _linked_position(g, pt.frames[0], v)
        l1 = _linked_position(g, pt.frames[1], v)
        F = _flow_at(flow, l0[0], l0[1], l0[2])
        phi[lay.temporal[v]] -= temporal_feature(l0[1:], l1[1:], F)
    return phi


def _feature_subtree(g, v, fp, pyr, parent_xy, phi, lay):
    n = g.nodes[v]
    if n.kind == TERMINAL:
        lvl, x, y = fp.placements[v]
        w, h = n.size
        win = pyr.levels[lvl][y:y + h, x:x + w]
        if win.shape != n.appearance.shape:
            raise IndexError(f"terminal {v} placement ({lvl},{x},{y}) outside the pyramid")
        tx, ty = terminal_target(n, parent_xy)
        phi[lay.appearance[v]] += win.ravel()
        phi[lay.deformation[v]] -= deformation_feature(x - tx, y - ty)
        return
    xy = fp.placements[v][1:]
    if n.kind == AND:
        phi[lay.bias[(v, 0)]] += 1.0
        for c in n.children:
            _feature_subtree(g, c, fp, pyr, xy, phi, lay)
        return
    j = fp.choices[v]
    phi[lay.bias[(v, j)]] += 1.0
    _feature_subtree(g, n.children[j], fp, pyr, xy, phi, lay)


def joint_feature(g: AOGraph, pg: ParseGraph, feats: Sequence, flows: Sequence) -> np.ndarray:
    """Feature map with ``<pack_weights(g), joint_feature(...)>`` equal to
    the video score of ``pg``."""
    lay = weight_layout(g)
    acc = np.zeros(lay.size)
    for pt in pg.trees:
        acc += tree_feature(g, pt, (feats[pt.pair], feats[pt.pair + 1]),
                            flows[pt.pair] if flows is not None else None, lay)
    return acc / len(pg.trees)


# --------------------------------------------------------------- serialization

def _node_to_dict(n) -> dict:
    d = {"id": n.id, "kind": n.kind, "tag": n.tag}
    if n.kind == TERMINAL:
        d.update(size=list(n.size), scale_factor=n.scale_factor, anchor=list(n.anchor),
                 part=n.part, status=n.status)
    elif n.kind == AND:
        d.update(children=list(n.children), box=list(n.box) if n.box else None,
                 view=n.view, car_type=n.car_type)
    else:
        d.update(children=list(n.children), part=n.part,
                 statuses=list(n.statuses) if n.statuses else None)
    return d


def to_dict(g: AOGraph, encoding: str = "array") -> dict:
    w = pack_weights(g)
    if encoding == "base64":
        weights = base64.b64encode(w.astype("<f8").tobytes()).decode("ascii")
    else:
        weights = [float(x) for x in w]
    return {
        "layout_version": LAYOUT_VERSION,
        "root": g.root,
        "channels": g.channels,
        "nodes": [_node_to_dict(n) for n in g.nodes],
        "edges": {"spatial": [[n.id, c] for n in g.nodes for c in n.children]},
        "temporal": list(g.temporal),
        "weights": weights,
        "meta": g.meta,
    }


def from_dict(d: dict) -> AOGraph:
    if d.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported layout_version {d.get('layout_version')}")
    C = int(d["channels"])
    nodes = []
    for nd in d["nodes"]:
        k = nd["kind"]
        if k == TERMINAL:
            w, h = nd["size"]
            nodes.append(TerminalNode(nd["id"], (w, h), np.zeros((h, w, C)), np.zeros(4),
                                      nd["scale_factor"], tuple(nd["anchor"]), nd.get("tag", ""),
                                      nd.get("part"), nd.get("status")))
        elif k == AND:
            box = tuple(nd["box"]) if nd.get("box") else None
            nodes.append(AndNode(nd["id"], list(nd["children"]), 0.0, 0.0, nd.get("tag", ""),
                                 box, nd.get("view"), nd.get("car_type")))
        elif k == OR:
            st = tuple(nd["statuses"]) if nd.get("statuses") else None
            nodes.append(OrNode(nd["id"], list(nd["children"]), None, 0.0, nd.get("tag", ""),
                                nd.get("part"), st))
        else:
            raise ValueError(f"unknown node kind {k!r}")
    g = AOGraph(nodes, int(d["root"]), list(d.get("temporal", [])), C, dict(d.get("meta", {})))
    w = d["weights"]
    if isinstance(w, str):
        w = np.frombuffer(base64.b64decode(w), dtype="<f8")
    unpack_weights(g, np.asarray(w, dtype=np.float64))
    return g


def save_model(g: AOGraph, path, encoding: str = "array") -> None:
    Path(path).write_text(json.dumps(to_dict(g, encoding), indent=1))


def load_model(path) -> AOGraph:
    return from_dict(json.loads(Path(path).read_text()))


def iter_nodes(g: AOGraph, kind: str) -> Iterable:
    return (n for n in g.nodes if n.kind == kind)
