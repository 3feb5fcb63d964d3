"""Per-frame bottom-up pass: score maps for every node at every root level,
temporal links ignored.

All non-terminal maps at root level ``lam`` live on the root lattice of that
level (one value per candidate root cell). A terminal's map at ``lam`` is
the best placement of its template at level ``lam - sigma*interval`` given the
root cell, found by a distance transform of its filter response.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph import AND, OR, TERMINAL, AOGraph, FrameParse
from ..pyramid import FeaturePyramid, filter_response
from .dt import NEG_INF, dt_gather, flip_linear


@dataclass
class Constraints:
    """Restrictions used by constrained (latent / loss-augmented) inference.

    ``placements[(terminal, level)]`` is a boolean mask over top-left cells
    of that level; ``root_cells[(node, level)]`` masks root cells of a
    non-terminal; ``branches`` lists allowed root children by index.
    Missing entries mean "no restriction".
    """
    placements: dict = field(default_factory=dict)
    root_cells: dict = field(default_factory=dict)
    branches: frozenset | None = None
    levels: frozenset | None = None


@dataclass
class ScoreMap:
    node: int
    level: int
    values: np.ndarray
    arg: np.ndarray | None = None  # Or: child index; terminal: (H, W, 2) placement


class FrameScorer:
    """Caches filter responses of one frame, padded to the level grid with -inf."""

    def __init__(self, g: AOGraph, pyr: FeaturePyramid):
        self.g = g
        self.pyr = pyr
        self._resp: dict = {}

    def response(self, tid: int, level: int):
        key = (tid, level)
        if key not in self._resp:
            t = self.g.nodes[tid]
            grid = self.pyr.levels[level]
            H, W = grid.shape[:2]
            w, h = t.size
            if w > W or h > H:
                self._resp[key] = None
            else:
                r = np.full((H, W), NEG_INF)
                r[:H - h + 1, :W - w + 1] = filter_response(grid, t.appearance)
                self._resp[key] = r
        return self._resp[key]

    def masked(self, tid: int, level: int, cons: Constraints | None):
        r = self.response(tid, level)
        if r is None or cons is None:
            return r
        m = cons.placements.get((tid, level))
        return r if m is None else np.where(m, r, NEG_INF)


@dataclass
class FrameMaps:
    maps: dict  # (node, level) -> ScoreMap
    levels: list[int]
    scorer: FrameScorer
    constraints: Constraints | None = None
    skipped: list = field(default_factory=list)  # (terminal, level) pairs

    def __getitem__(self, key) -> ScoreMap:
        return self.maps[key]

    def root_mask(self, v: int, level: int):
        if self.constraints is None:
            return None
        return self.constraints.root_cells.get((v, level))


def placement_level(g: AOGraph, t, level: int, interval: int) -> int:
    return level - t.scale_factor * interval


def terminal_targets(t, W: int, H: int):
    """Target top-left cells for every root cell of a ``W x H`` root lattice."""
    m = 2 if t.scale_factor == 1 else 1
    yy, xx = np.mgrid[0:H, 0:W]
    return xx * m + t.anchor[0], yy * m + t.anchor[1]


def frame_pass(g: AOGraph, pyr: FeaturePyramid, constraints: Constraints | None = None,
               scorer: FrameScorer | None = None) -> FrameMaps:
    """Score maps of all nodes at all levels, children first."""
    scorer = scorer or FrameScorer(g, pyr)
    if scorer.pyr is not pyr:
        raise ValueError("scorer was built for a different pyramid")
    for t in g.terminals:
        if not (t.deformation[1] > 0 and t.deformation[3] > 0):
            raise ValueError(f"terminal {t.id}: quadratic deformation weights must be > 0")
    order = g.dfs_order()
    levels = [k for k in range(len(pyr))
              if constraints is None or constraints.levels is None or k in constraints.levels]
    out = FrameMaps({}, levels, scorer, constraints)
    for lam in levels:
        W, H = pyr.dims(lam)
        for v in order:
            n = g.nodes[v]
            if n.kind == TERMINAL:
                pl = placement_level(g, n, lam, pyr.interval)
                r = scorer.masked(v, pl, constraints) if pl >= 0 else None
                if r is None:
                    out.skipped.append((v, lam))
                    out.maps[(v, lam)] = ScoreMap(v, lam, np.full((H, W), NEG_INF),
                                                  np.full((H, W, 2), -1, dtype=np.int64))
                    continue
                tx, ty = terminal_targets(n, W, H)
                vals, sx, sy = dt_gather(r, flip_linear(n.deformation), tx, ty)
                out.maps[(v, lam)] = ScoreMap(v, lam, vals, np.stack([sx, sy], axis=-1))
            elif n.kind == AND:
                vals = np.full((H, W), float(n.bias))
                for c in n.children:
                    vals = vals + out.maps[(c, lam)].values
                vals = _mask_root(vals, constraints, v, lam)
                out.maps[(v, lam)] = ScoreMap(v, lam, vals)
            else:
                stack = np.stack([out.maps[(c, lam)].values + b
                                  for c, b in zip(n.children, n.child_bias)])
                if v == g.root and constraints is not None and constraints.branches is not None:
                    for j in range(len(n.children)):
                        if j not in constraints.branches:
                            stack[j] = NEG_INF
                arg = np.argmax(stack, axis=0)
                vals = np.take_along_axis(stack, arg[None], axis=0)[0]
                vals = _mask_root(vals, constraints, v, lam)
                out.maps[(v, lam)] = ScoreMap(v, lam, vals, arg)
    return out


def _mask_root(vals, cons, v, lam):
    if cons is None:
        return vals
    m = cons.root_cells.get((v, lam))
    return vals if m is None else np.where(m, vals, NEG_INF)


def backtrace(g: AOGraph, fm: FrameMaps, v: int, level: int, cell, fp: FrameParse,
              override: dict | None = None) -> None:
    """Fill ``fp`` with the argmax subtree of ``v`` at root cell ``cell``.

    ``override`` maps Or-node ids to ``(choice, (level, x, y))`` decisions
    made elsewhere (the temporally coupled parts).
    """
    x, y = int(cell[0]), int(cell[1])
    queue = [v]
    while queue:
        u = queue.pop(0)
        n = g.nodes[u]
        if n.kind == TERMINAL:
            sx, sy = fm.maps[(u, level)].arg[y, x]
            pl = placement_level(g, n, level, fm.scorer.pyr.interval)
            fp.placements[u] = (pl, int(sx), int(sy))
            continue
        fp.placements[u] = (level, x, y)
        if n.kind == AND:
            queue.extend(n.children)
        elif override is not None and u in override:
            j, pos = override[u]
            fp.choices[u] = j
            fp.placements[n.children[j]] = pos
        else:
            j = int(fm.maps[(u, level)].arg[y, x])
            fp.choices[u] = j
            queue.append(n.children[j])
