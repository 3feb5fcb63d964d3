"""Coupling two consecutive frames through the temporal links.

For one single-car And-node ``r`` and its linked part Or-nodes ``p_k`` the
frame pair forms loops r - p_k - p~_k - r~ - r. Max-product messages are
passed around them (all pairwise terms are quadratic, so every message is a
distance transform, the temporal ones on the flow-shifted lattice).

Decoding: the message r~ -> r proposes a partner cell q*(c) in frame i+1
for every root cell c. Given (c, q*(c)) each part chain is a tree and is
solved exactly, so every value in the resulting pair map is the score of a
real parse tree and the backtrace reproduces it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ..graph import AND, OR, TERMINAL, AOGraph
from ..pyramid import FlowPyramid
from .dt import (NEG_INF, dt_gather, flip_linear, flow_backward, flow_backward_batch,
                 flow_forward, scatter_dt)
from .framepass import FrameMaps, placement_level


@dataclass
class LBPConfig:
    max_iters: int = 20
    eps: float = 1e-6


@dataclass
class ChainDecode:
    part: int
    level: int  # placement level of the part's terminals
    s0: np.ndarray  # chosen child index per root cell (-1 when infeasible)
    x0: np.ndarray
    y0: np.ndarray
    s1: np.ndarray
    x1: np.ndarray
    y1: np.ndarray


@dataclass
class BranchPair:
    node: int
    level: int
    pair: np.ndarray  # exact score of the decoded parse, per root cell of frame i
    qx: np.ndarray  # partner cell in frame i+1
    qy: np.ndarray
    chains: list[ChainDecode]
    belief0: np.ndarray
    belief1: np.ndarray
    converged: bool = True
    iterations: int = 0


@dataclass
class CoupledMaps:
    fm0: FrameMaps
    fm1: FrameMaps
    branches: dict = field(default_factory=dict)  # (node, level) -> BranchPair

    @property
    def converged(self) -> bool:
        return all(b.converged for b in self.branches.values())

    def frame_maps(self, f: int) -> dict:
        """Coupled belief maps of the root children for frame ``f``, offset so
        that each map's maximum equals the uncoupled map's maximum."""
        fm = self.fm0 if f == 0 else self.fm1
        out = {}
        for key, b in self.branches.items():
            bel = b.belief0 if f == 0 else b.belief1
            ref = fm.maps[key].values
            if np.isfinite(bel).any() and np.isfinite(ref).any():
                out[key] = bel - bel[np.isfinite(bel)].max() + ref[np.isfinite(ref)].max()
            else:
                out[key] = np.full_like(bel, NEG_INF)
        return out


def coupling_plan(g: AOGraph) -> dict[int, list[int]]:
    """Linked part Or-nodes per root child; rejects unsupported link sites."""
    root = g.nodes[g.root]
    plan = {c: [] for c in root.children}
    covered = set()
    for c in root.children:
        n = g.nodes[c]
        if c in g.temporal:
            if n.kind != AND:
                raise ValueError(f"linked node {c} under the root must be an And-node")
            covered.add(c)
        if n.kind != AND:
            continue
        for p in n.children:
            if p in g.temporal:
                pn = g.nodes[p]
                if pn.kind != OR or any(g.nodes[t].kind != TERMINAL for t in pn.children):
                    raise ValueError(f"linked node {p} must be an Or-node over terminals")
                plan[c].append(p)
                covered.add(p)
    stray = set(g.temporal) - covered
    if stray:
        raise ValueError(f"temporal links on nodes {sorted(stray)} are not supported: "
                         "links live on root-level And-nodes and their part Or-nodes")
    return plan


def _norm(m):
    fin = np.isfinite(m)
    return m - m[fin].max() if fin.any() else m


def _delta(a, b) -> float:
    fa, fb = np.isfinite(a), np.isfinite(b)
    if (fa != fb).any():
        return np.inf
    return float(np.abs(a[fa] - b[fa]).max()) if fa.any() else 0.0


class _Part:
    """Unaries and geometry of one linked part on its placement lattice."""

    def __init__(self, g, p, lam, fm0, fm1, interval):
        n = g.nodes[p]
        self.id = p
        terms = [g.nodes[t] for t in n.children]
        sig = {t.scale_factor for t in terms}
        if len(sig) != 1:
            raise ValueError(f"part {p} mixes scale factors")
        t0 = terms[0]
        self.level = placement_level(g, t0, lam, interval)
        self.mult = 2 if t0.scale_factor == 1 else 1
        self.terms = terms
        self.bias = list(n.child_bias)
        self.theta = g.nodes[p].temporal_weight
        self._tcache = {}
        self.feasible = self.level >= 0
        if not self.feasible:
            return
        W, H = fm0.scorer.pyr.dims(self.level)
        self.shape = (H, W)
        self.U0, self.U1 = [], []
        for t, b in zip(terms, self.bias):
            for fm, acc in ((fm0, self.U0), (fm1, self.U1)):
                r = fm.scorer.masked(t.id, self.level, fm.constraints)
                acc.append(np.full((H, W), NEG_INF) if r is None else r + b)

    def targets(self, s, W, H):
        key = (s, W, H)
        if key not in self._tcache:
            t = self.terms[s]
            yy, xx = np.mgrid[0:H, 0:W]
            self._tcache[key] = (xx * self.mult + t.anchor[0], yy * self.mult + t.anchor[1])
        return self._tcache[key]

    def to_root(self, gs, W, H):
        """max_{s,l} gs[s](l) - def_s . phi(l - t_s(c)) for every root cell c."""
        out = np.full((H, W), NEG_INF)
        for s, t in enumerate(self.terms):
            tx, ty = self.targets(s, W, H)
            v, _, _ = dt_gather(gs[s], flip_linear(t.deformation), tx, ty, False)
            out = np.maximum(out, v)
        return out

    def from_root(self, h):
        """Per-status message max_c h(c) - def_s . phi(l - t_s(c)), jointly normalized."""
        ms = [scatter_dt(h, self.mult, t.anchor, t.deformation, self.shape) for t in self.terms]
        fin = [m[np.isfinite(m)] for m in ms]
        top = max((f.max() for f in fin if f.size), default=None)
        return [m - top for m in ms] if top is not None else ms


def _unaries(g, fm, v, lam, linked):
    n = g.nodes[v]
    if n.kind != AND:
        return fm.maps[(v, lam)].values
    W, H = fm.scorer.pyr.dims(lam)
    u = np.full((H, W), float(n.bias))
    for c in n.children:
        if c not in linked:
            u = u + fm.maps[(c, lam)].values
    m = fm.root_mask(v, lam)
    return u if m is None else np.where(m, u, NEG_INF)


def couple_branch(g: AOGraph, fm0: FrameMaps, fm1: FrameMaps, flow: FlowPyramid | None,
                  v: int, lam: int, parts: list[int], cfg: LBPConfig) -> BranchPair:
    pyr = fm0.scorer.pyr
    W, H = pyr.dims(lam)
    interval = pyr.interval
    theta_r = g.nodes[v].temporal_weight if v in g.temporal else 0.0
    F = flow.rounded(lam) if flow is not None else np.zeros((H, W, 2), dtype=np.int64)
    U0 = _unaries(g, fm0, v, lam, set(parts))
    U1 = _unaries(g, fm1, v, lam, set(parts))
    P = [_Part(g, p, lam, fm0, fm1, interval) for p in parts]
    if not all(p.feasible for p in P):
        U0 = np.full((H, W), NEG_INF)
        P = []
    Fp = []
    for p in P:
        if flow is not None:
            Fp.append(flow.rounded(p.level))
        else:
            Fp.append(np.zeros(p.shape + (2,), dtype=np.int64))

    K = len(P)
    zH = np.zeros((H, W))
    m_pr = [zH.copy() for _ in P]          # p -> r
    m_p1r1 = [zH.copy() for _ in P]        # p~ -> r~
    m_rp = [[np.zeros(p.shape) for _ in p.terms] for p in P]     # r -> p
    m_r1p1 = [[np.zeros(p.shape) for _ in p.terms] for p in P]   # r~ -> p~
    m_pp1 = [np.zeros(p.shape) for p in P]  # p -> p~
    m_p1p = [np.zeros(p.shape) for p in P]  # p~ -> p
    m_rr1 = zH.copy()
    m_r1r = zH.copy()
    qx = np.zeros((H, W), dtype=np.int64)
    qy = np.zeros((H, W), dtype=np.int64)

    converged, it = True, 0
    if K == 0:
        vals, qx, qy = flow_backward(U1, theta_r, F)
        m_r1r = vals
        m_rr1 = flow_forward(U0, theta_r, F)[0]
    else:
        converged = False
        for it in range(1, cfg.max_iters + 1):
            old = [m_r1r, m_rr1] + m_pr + m_p1r1 + m_pp1 + m_p1p
            for k, p in enumerate(P):
                m_pr[k] = _norm(p.to_root([u + m_p1p[k] for u in p.U0], W, H))
            m_rr1 = _norm(flow_forward(U0 + sum(m_pr), theta_r, F)[0])
            for k, p in enumerate(P):
                h = U1 + m_rr1 + sum(m_p1r1[j] for j in range(K) if j != k)
                m_r1p1[k] = p.from_root(h)
            for k, p in enumerate(P):
                h = np.max([u + m for u, m in zip(p.U1, m_r1p1[k])], axis=0)
                m_p1p[k] = _norm(flow_backward(h, p.theta, Fp[k], False)[0])
            for k, p in enumerate(P):
                h = np.max([u + m for u, m in zip(p.U0, m_rp[k])], axis=0)
                m_pp1[k] = _norm(flow_forward(h, p.theta, Fp[k])[0])
            for k, p in enumerate(P):
                m_p1r1[k] = _norm(p.to_root([u + m_pp1[k] for u in p.U1], W, H))
            vals, qx, qy = flow_backward(U1 + sum(m_p1r1), theta_r, F)
            m_r1r = _norm(vals)
            for k, p in enumerate(P):
                h = U0 + m_r1r + sum(m_pr[j] for j in range(K) if j != k)
                m_rp[k] = p.from_root(h)
            new = [m_r1r, m_rr1] + m_pr + m_p1r1 + m_pp1 + m_p1p
            if max(_delta(a, b) for a, b in zip(old, new)) < cfg.eps:
                converged = True
                break

    belief0 = U0 + m_r1r + sum(m_pr) if K else U0 + m_r1r
    belief1 = U1 + m_rr1 + sum(m_p1r1) if K else U1 + m_rr1

    # exact decode given (c, q*(c))
    active = np.isfinite(U0) & (qx >= 0)
    pair = np.full((H, W), NEG_INF)
    chains = []
    ay, ax = np.nonzero(active)
    if ay.size:
        cqx, cqy = qx[ay, ax], qy[ay, ax]
        d0 = ax + F[ay, ax, 0] - cqx
        d1 = ay + F[ay, ax, 1] - cqy
        tot = U0[ay, ax] + U1[cqy, cqx] - theta_r * (d0 * d0 + d1 * d1)
        qi = cqy * W + cqx
        uq, inv = np.unique(qi, return_inverse=True)
        uqy, uqx = np.divmod(uq, W)
        for k, p in enumerate(P):
            val, dec = _decode_chain(p, Fp[k], ax, ay, uqx, uqy, inv, (H, W))
            tot = tot + val
            chains.append(dec)
        pair[ay, ax] = tot
    else:
        for p in P:
            e = np.full((H, W), -1, dtype=np.int64)
            chains.append(ChainDecode(p.id, p.level, e, e, e, e, e, e))
    return BranchPair(v, lam, pair, qx, qy, chains, belief0, belief1, converged, it)


@njit(cache=True)
def _partner_max(U1, defs, anch, mult, uqx, uqy):
    """G_q(l) = max_s U1_s(l) - def_s . phi(l - t_s(q)), first s on ties."""
    S, Hp, Wp = U1.shape
    Nq = uqx.size
    G = np.full((Nq, Hp, Wp), -np.inf)
    Gs = np.zeros((Nq, Hp, Wp), dtype=np.int64)
    for q in range(Nq):
        for s in range(S):
            tx = uqx[q] * mult + anch[s, 0]
            ty = uqy[q] * mult + anch[s, 1]
            for y in range(Hp):
                dy = y - ty
                cy = defs[s, 2] * dy + defs[s, 3] * dy * dy
                for x in range(Wp):
                    dx = x - tx
                    v = U1[s, y, x] - (defs[s, 0] * dx + defs[s, 1] * dx * dx + cy)
                    if v > G[q, y, x]:
                        G[q, y, x] = v
                        Gs[q, y, x] = s
    return G, Gs


@njit(cache=True)
def _root_side_max(U0, defs, anch, mult, ax, ay, K, inv):
    """argmax over (s, l) of U0_s(l) - def_s . phi(l - t_s(c)) + K_q(c)(l)."""
    S, Hp, Wp = U0.shape
    Na = ax.size
    best = np.full(Na, -np.inf)
    bs = np.full(Na, -1, dtype=np.int64)
    bl = np.zeros(Na, dtype=np.int64)
    for a in range(Na):
        q = inv[a]
        for s in range(S):
            tx = ax[a] * mult + anch[s, 0]
            ty = ay[a] * mult + anch[s, 1]
            for y in range(Hp):
                dy = y - ty
                cy = defs[s, 2] * dy + defs[s, 3] * dy * dy
                for x in range(Wp):
                    dx = x - tx
                    v = U0[s, y, x] - (defs[s, 0] * dx + defs[s, 1] * dx * dx + cy) + K[q, y, x]
                    if v > best[a]:
                        best[a] = v
                        bs[a] = s
                        bl[a] = y * Wp + x
    return best, bs, bl


def _decode_chain(p: _Part, Fp, ax, ay, uqx, uqy, inv, root_shape):
    Hp, Wp = p.shape
    H, W = root_shape
    defs = np.array([t.deformation for t in p.terms], dtype=np.float64)
    anch = np.array([t.anchor for t in p.terms], dtype=np.int64)
    G, Gs = _partner_max(np.stack(p.U1), defs, anch, p.mult,
                         np.ascontiguousarray(uqx, dtype=np.int64),
                         np.ascontiguousarray(uqy, dtype=np.int64))
    Kv, kx, ky = flow_backward_batch(G, p.theta, Fp)
    best, bs, bl = _root_side_max(np.stack(p.U0), defs, anch, p.mult,
                                  np.ascontiguousarray(ax, dtype=np.int64),
                                  np.ascontiguousarray(ay, dtype=np.int64),
                                  np.ascontiguousarray(Kv, dtype=np.float64),
                                  np.ascontiguousarray(inv, dtype=np.int64))
    ly, lx = np.divmod(bl, Wp)
    l1x = kx[inv, ly, lx]
    l1y = ky[inv, ly, lx]
    ok = (bs >= 0) & (l1x >= 0)
    s1 = np.where(ok, Gs[inv, np.maximum(l1y, 0), np.maximum(l1x, 0)], -1)

    def grid(a):
        out = np.full((H, W), -1, dtype=np.int64)
        out[ay, ax] = np.where(ok, a, -1)
        return out

    best = np.where(ok, best, NEG_INF)
    return best, ChainDecode(p.id, p.level, grid(bs), grid(lx), grid(ly),
                             grid(s1), grid(l1x), grid(l1y))


def temporal_couple(g: AOGraph, fm0: FrameMaps, fm1: FrameMaps, flow: FlowPyramid | None,
                    cfg: LBPConfig | None = None) -> CoupledMaps:
    """Couple two frame passes; one :class:`BranchPair` per root child and level."""
    cfg = cfg or LBPConfig()
    plan = coupling_plan(g)
    out = CoupledMaps(fm0, fm1)
    for lam in fm0.levels:
        for v, parts in plan.items():
            out.branches[(v, lam)] = couple_branch(g, fm0, fm1, flow, v, lam, parts, cfg)
    return out
