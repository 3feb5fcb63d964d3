"""Slow exhaustive references for the fast paths. Nothing here shares code
with the inference routines it checks."""
from __future__ import annotations

import itertools

import numpy as np

from .graph import AND, OR, TERMINAL, AOGraph

NEG_INF = -np.inf


def brute_force_dt(grid: np.ndarray, weights) -> np.ndarray:
    """O(W^2 H^2) quadratic max-convolution: every target against every source."""
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape
    w = np.asarray(weights, dtype=np.float64)
    yy, xx = np.divmod(np.arange(H * W), W)
    dx = xx[:, None] - xx[None, :]  # (target, source)
    dy = yy[:, None] - yy[None, :]
    cost = w[0] * dx + w[1] * dx * dx + w[2] * dy + w[3] * dy * dy
    with np.errstate(invalid="ignore"):
        cand = grid.ravel()[None, :] - cost
    cand[:, ~np.isfinite(grid.ravel())] = NEG_INF
    return cand.max(axis=1).reshape(H, W)


def _terminal_best(t, grid, parent_xy):
    """Best placement of one terminal given its parent cell, by direct loops."""
    H, W = grid.shape[:2]
    w, h = t.size
    m = 2 if t.scale_factor == 1 else 1
    tx = parent_xy[0] * m + t.anchor[0]
    ty = parent_xy[1] * m + t.anchor[1]
    best, arg = NEG_INF, None
    for y in range(H - h + 1):
        for x in range(W - w + 1):
            app = float(np.sum(grid[y:y + h, x:x + w] * t.appearance))
            dx, dy = x - tx, y - ty
            d = t.deformation
            s = app - (d[0] * dx + d[1] * dx * dx + d[2] * dy + d[3] * dy * dy)
            if s > best:
                best, arg = s, (x, y)
    return best, arg


def _choice_sets(g: AOGraph, v: int):
    """All Or-choice assignments of the subtree under ``v``: list of dicts."""
    n = g.nodes[v]
    if n.kind == TERMINAL:
        return [{}]
    if n.kind == AND:
        combos = [_choice_sets(g, c) for c in n.children]
        out = []
        for parts in itertools.product(*combos):
            d = {}
            for p in parts:
                d.update(p)
            out.append(d)
        return out
    out = []
    for j, c in enumerate(n.children):
        for d in _choice_sets(g, c):
            e = dict(d)
            e[v] = j
            out.append(e)
    return out


def _selected_terminals(g, v, choices):
    n = g.nodes[v]
    if n.kind == TERMINAL:
        return [v]
    if n.kind == AND:
        return [t for c in n.children for t in _selected_terminals(g, c, choices)]
    return _selected_terminals(g, n.children[choices[v]], choices)


def _bias_sum(g, v, choices):
    n = g.nodes[v]
    if n.kind == TERMINAL:
        return 0.0
    if n.kind == AND:
        return n.bias + sum(_bias_sum(g, c, choices) for c in n.children)
    j = choices[v]
    return n.child_bias[j] + _bias_sum(g, n.children[j], choices)


def enumerate_node_map(g: AOGraph, pyr, v: int, level: int) -> np.ndarray:
    """Best subtree score of ``v`` for every root cell at ``level``, by
    enumerating every Or-choice assignment and every terminal placement."""
    W, H = pyr.dims(level)
    out = np.full((H, W), NEG_INF)
    cache = {}
    for choices in _choice_sets(g, v):
        terms = _selected_terminals(g, v, choices)
        b = _bias_sum(g, v, choices)
        for y in range(H):
            for x in range(W):
                s = b
                for t in terms:
                    node = g.nodes[t]
                    pl = level - node.scale_factor * pyr.interval
                    if pl < 0:
                        s = NEG_INF
                        break
                    key = (t, level, x, y)
                    if key not in cache:
                        grid = pyr.levels[pl]
                        if node.size[0] > grid.shape[1] or node.size[1] > grid.shape[0]:
                            cache[key] = NEG_INF
                        else:
                            cache[key] = _terminal_best(node, grid, (x, y))[0]
                    s += cache[key]
                if s > out[y, x]:
                    out[y, x] = s
    return out


def enumerate_pair_best(g: AOGraph, feat0, feat1) -> float:
    """Best frame-pair score of a graph without temporal links."""
    if g.temporal:
        raise ValueError("use exhaustive_pair_best for linked graphs")
    root = g.nodes[g.root]
    best = NEG_INF
    for lam in range(min(len(feat0), len(feat1))):
        for j, c in enumerate(root.children):
            a = enumerate_node_map(g, feat0, c, lam).max()
            b = enumerate_node_map(g, feat1, c, lam).max()
            best = max(best, root.child_bias[j] + a + b)
    return float(best)


def _part_unary(g, p, pyr, level):
    """(S, H, W) array of bias_s + response_s(l), -inf where the window does not fit."""
    n = g.nodes[p]
    W, H = pyr.dims(level)
    out = np.full((len(n.children), H, W), NEG_INF)
    grid = pyr.levels[level]
    for s, t in enumerate(n.children):
        tn = g.nodes[t]
        w, h = tn.size
        for y in range(H - h + 1):
            for x in range(W - w + 1):
                out[s, y, x] = n.child_bias[s] + float(np.sum(grid[y:y + h, x:x + w] * tn.appearance))
    return out


def exhaustive_pair_best(g: AOGraph, feat0, feat1, flow) -> tuple[float, dict]:
    """Exact best pair score with temporal terms, by joint enumeration.

    Supports root children that are And-nodes whose linked children are
    part Or-nodes over terminals (static children are maximized per frame).
    Cost grows with the fourth power of the lattice size; meant for <= 6x6.
    """
    root = g.nodes[g.root]
    best, info = NEG_INF, {}
    for lam in range(min(len(feat0), len(feat1))):
        W, H = feat0.dims(lam)
        ncell = W * H
        cy, cx = np.divmod(np.arange(ncell), W)
        F = np.rint(flow.levels[lam]).astype(int) if flow is not None else np.zeros((H, W, 2), int)
        for j, v in enumerate(root.children):
            n = g.nodes[v]
            linked = [c for c in getattr(n, "children", []) if c in g.temporal] if n.kind == AND else []
            static = [c for c in n.children if c not in linked] if n.kind == AND else None
            if n.kind == AND:
                U0 = np.full(ncell, float(n.bias))
                U1 = np.full(ncell, float(n.bias))
                for c in static:
                    U0 = U0 + enumerate_node_map(g, feat0, c, lam).ravel()
                    U1 = U1 + enumerate_node_map(g, feat1, c, lam).ravel()
                th_r = n.temporal_weight if v in g.temporal else 0.0
            else:
                U0 = enumerate_node_map(g, feat0, v, lam).ravel()
                U1 = enumerate_node_map(g, feat1, v, lam).ravel()
                th_r = 0.0
            # total[c, q]
            fx = F[cy, cx, 0]
            fy = F[cy, cx, 1]
            d0 = cx[:, None] + fx[:, None] - cx[None, :]
            d1 = cy[:, None] + fy[:, None] - cy[None, :]
            total = U0[:, None] + U1[None, :] - th_r * (d0 * d0 + d1 * d1)
            for p in linked:
                pn = g.nodes[p]
                sig = g.nodes[pn.children[0]].scale_factor
                pl = lam - sig * feat0.interval
                if pl < 0:
                    total = np.full_like(total, NEG_INF)
                    continue
                Wp, Hp = feat0.dims(pl)
                nl = Wp * Hp
                ly, lx = np.divmod(np.arange(nl), Wp)
                A0 = _part_unary(g, p, feat0, pl).reshape(len(pn.children), nl)
                A1 = _part_unary(g, p, feat1, pl).reshape(len(pn.children), nl)
                m = 2 if sig == 1 else 1
                # best over status of unary - deformation, per (root cell, l)
                B0 = np.full((ncell, nl), NEG_INF)
                B1 = np.full((ncell, nl), NEG_INF)
                for s, t in enumerate(pn.children):
                    tn = g.nodes[t]
                    dx = lx[None, :] - (cx[:, None] * m + tn.anchor[0])
                    dy = ly[None, :] - (cy[:, None] * m + tn.anchor[1])
                    d = tn.deformation
                    cost = d[0] * dx + d[1] * dx * dx + d[2] * dy + d[3] * dy * dy
                    B0 = np.maximum(B0, A0[s][None, :] - cost)
                    B1 = np.maximum(B1, A1[s][None, :] - cost)
                Fp = np.rint(flow.levels[pl]).astype(int) if flow is not None else np.zeros((Hp, Wp, 2), int)
                e0 = lx[:, None] + Fp[ly, lx, 0][:, None] - lx[None, :]
                e1 = ly[:, None] + Fp[ly, lx, 1][:, None] - ly[None, :]
                T = -pn.temporal_weight * (e0 * e0 + e1 * e1)  # (l, l~)
                # chain[c, q] = max_{l, l~} B0[c, l] + T[l, l~] + B1[q, l~]
                inner = np.max(T[None, :, :] + B1[:, None, :], axis=2)  # (q, l)
                chain = np.max(B0[:, None, :] + inner[None, :, :], axis=2)  # (c, q)
                total = total + chain
            val = root.child_bias[j] + total.max()
            if val > best:
                i = int(np.argmax(total))
                best = float(val)
                info = {"level": lam, "branch": j, "c": divmod(i // ncell, W)[::-1],
                        "q": divmod(i % ncell, W)[::-1]}
    return best, info


def enumerate_paths(proposals, score_fn):
    """Max of ``score_fn(path)`` over all one-proposal-per-frame paths."""
    best, arg = NEG_INF, None
    for idx in itertools.product(*[range(len(f)) for f in proposals]):
        path = [proposals[i][k] for i, k in enumerate(idx)]
        s = score_fn(path)
        if s > best:
            best, arg = s, idx
    return best, arg


def naive_vlad_raw(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Per-point nearest-centroid residual accumulation, point by point."""
    k, d = C.shape
    acc = np.zeros((k, d))
    for x in X:
        best, bi = np.inf, 0
        for i in range(k):
            dist = 0.0
            for a, b in zip(x, C[i]):
                dist += (a - b) * (a - b)
            if dist < best:
                best, bi = dist, i
        acc[bi] += x - C[bi]
    return acc.ravel()


def naive_vlad(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    v = naive_vlad_raw(X, C)
    v = np.sign(v) * np.sqrt(np.abs(v))
    n = np.sqrt(sum(t * t for t in v))
    return v / n if n > 0 else v


# ------------------------------------------------------- random instances

def dyadic(rng, shape, lo=-4.0, hi=4.0, denom=8):
    """Random multiples of ``1/denom``: sums of a few of them are exact in float64."""
    return rng.integers(int(lo * denom), int(hi * denom) + 1, size=shape) / denom


def random_pyramid(rng, W: int, H: int, channels: int = 2, levels: int = 2, interval: int = 1):
    from .pyramid import FeaturePyramid
    grids, scales = [], []
    for k in range(levels):
        s = 2.0 ** (-k / interval)
        w, h = max(1, int(np.ceil(W * s))), max(1, int(np.ceil(H * s)))
        grids.append(dyadic(rng, (h, w, channels), -2, 2))
        scales.append(s)
    return FeaturePyramid(grids, scales, cell_size=4, interval=interval)


def random_flow(rng, pyr, radius: int = 1):
    from .pyramid import FlowPyramid
    lv = [rng.integers(-radius, radius + 1, size=g.shape[:2] + (2,)).astype(float) for g in pyr.levels]
    return FlowPyramid(lv, list(pyr.scales), pyr.cell_size, pyr.interval)


def random_graph(rng, channels: int = 2, branches: int = 2, max_parts: int = 2,
                 max_status: int = 2, allow_scale: bool = True, linked: bool = False,
                 max_size: int = 2):
    """Root Or -> And branches -> (part Or over terminals | terminal)."""
    from .graph import GraphBuilder
    b = GraphBuilder(channels)

    def term(sig=None):
        w, h = (int(v) for v in rng.integers(1, max_size + 1, 2))
        sig = int(rng.integers(0, 2)) if sig is None and allow_scale else (sig or 0)
        return b.terminal((w, h), dyadic(rng, (h, w, channels), -2, 2),
                          np.array([rng.integers(-4, 5) / 8, rng.integers(1, 9) / 8,
                                    rng.integers(-4, 5) / 8, rng.integers(1, 9) / 8]),
                          sig, tuple(int(v) for v in rng.integers(0, 3, 2)))

    kids = []
    for _ in range(branches):
        ch = [term(0)]
        for _ in range(int(rng.integers(1, max_parts + 1))):
            sig = int(rng.integers(0, 2)) if allow_scale else 0
            ts = [term(sig) for _ in range(int(rng.integers(1, max_status + 1)))]
            p = b.or_(ts, list(dyadic(rng, len(ts), -1, 1)),
                      temporal_weight=float(rng.integers(1, 9) / 8) if linked else 0.0)
            if linked:
                b.link(p)
            ch.append(p)
        a = b.and_(ch, float(dyadic(rng, (), -1, 1)),
                   temporal_weight=float(rng.integers(1, 9) / 8) if linked else 0.0)
        if linked:
            b.link(a)
        kids.append(a)
    root = b.or_(kids, list(dyadic(rng, len(kids), -1, 1)))
    return b.build(root)


def random_parse_tree(rng, g: AOGraph, feats, pair: int = 0):
    """Uniform Or choices and placements on the top level of ``feats``
    (terminals land wherever their window fits)."""
    from .graph import FrameParse, ParseTree
    lam = min(len(feats[0]), len(feats[1])) - 1
    root_choice = int(rng.integers(0, len(g.nodes[g.root].children)))
    frames = []
    for pyr in feats:
        fp = FrameParse()
        W, H = pyr.dims(lam)
        cell = (lam, int(rng.integers(0, W)), int(rng.integers(0, H)))

        def visit(v):
            n = g.nodes[v]
            if n.kind == TERMINAL:
                pl = lam - n.scale_factor * pyr.interval
                gh, gw = pyr.levels[pl].shape[:2]
                w, h = n.size
                fp.placements[v] = (pl, int(rng.integers(0, gw - w + 1)), int(rng.integers(0, gh - h + 1)))
                return
            fp.placements[v] = cell
            if n.kind == AND:
                for c in n.children:
                    visit(c)
            else:
                j = root_choice if v == g.root else int(rng.integers(0, len(n.children)))
                fp.choices[v] = j
                visit(n.children[j])

        visit(g.root)
        frames.append(fp)
    return ParseTree(lam, (frames[0], frames[1]), pair=pair)
