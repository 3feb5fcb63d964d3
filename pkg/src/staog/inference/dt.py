"""Generalized distance transforms (max-convolution with a separable
quadratic cost) and their flow-shifted variants.

Convention: for weights ``w = (a_x, b_x, a_y, b_y)``

    out(x, y) = max_{x', y'} in(x', y') - a_x*dx - b_x*dx^2 - a_y*dy - b_y*dy^2

with ``dx = x - x'`` and ``dy = y - y'``. Entries equal to ``-inf`` are
ignored as sources. The argmax grids hold the maximizing source cell
(``-1`` where no finite source exists).
"""
from __future__ import annotations

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _envelope_rows(f, a, b, out, arg):
    n_rows, n = f.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    g = np.empty(n)
    for r in range(n_rows):
        # parabola offsets in the min-form: P_q(x) = g(q) + b(x-q)^2 + a(x-q)
        k = -1
        for q in range(n):
            fq = f[r, q]
            if fq == -np.inf:
                continue
            g[q] = -fq
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                p = v[k]
                s = ((g[q] - g[p]) / (q - p) - a) / (2.0 * b) + (p + q) / 2.0
                if s <= z[k]:
                    k -= 1
                    if k < 0:
                        break
                else:
                    break
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
            else:
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = np.inf
        if k < 0:
            for x in range(n):
                out[r, x] = -np.inf
                arg[r, x] = -1
            continue
        j = 0
        for x in range(n):
            while z[j + 1] < x:
                j += 1
            q = v[j]
            d = x - q
            out[r, x] = f[r, q] - (a * d + b * d * d)
            arg[r, x] = q


def _dt_lines(f: np.ndarray, a: float, b: float):
    """1-D transform along the last axis of ``f`` (any leading shape)."""
    shape = f.shape
    flat = np.ascontiguousarray(f.reshape(-1, shape[-1]), dtype=np.float64)
    out = np.empty_like(flat)
    arg = np.empty(flat.shape, dtype=np.int64)
    _envelope_rows(flat, float(a), float(b), out, arg)
    return out.reshape(shape), arg.reshape(shape)


def _check(w):
    w = np.asarray(w, dtype=np.float64).reshape(4)
    if not (w[1] > 0 and w[3] > 0):
        raise ValueError(f"distance transform needs strictly positive quadratic weights, got {w}")
    return w


def distance_transform(grid: np.ndarray, weights) -> tuple[np.ndarray, np.ndarray]:
    """Separable O(WH) max-convolution of a ``(..., H, W)`` map.

    Returns ``(values, argmax)`` where ``argmax[..., y, x] = (x', y')``.
    """
    w = _check(weights)
    grid = np.asarray(grid, dtype=np.float64)
    # along x for every row
    tx, ax = _dt_lines(grid, w[0], w[1])
    # along y for every column
    ty, ay = _dt_lines(np.swapaxes(tx, -1, -2), w[2], w[3])
    values = np.swapaxes(ty, -1, -2)
    src_y = np.swapaxes(ay, -1, -2)
    safe_y = np.maximum(src_y, 0)
    src_x = np.take_along_axis(ax, safe_y, axis=-2)
    src_x = np.where(src_y < 0, -1, src_x)
    return values, np.stack([src_x, src_y], axis=-1)


@njit(cache=True)
def _dt2_values(f, a_x, b_x, a_y, b_y):
    H, W = f.shape
    tx = np.empty((H, W))
    arg = np.empty((H, W), dtype=np.int64)
    _envelope_rows(f, a_x, b_x, tx, arg)
    t = np.ascontiguousarray(tx.T)
    ty = np.empty((W, H))
    arg2 = np.empty((W, H), dtype=np.int64)
    _envelope_rows(t, a_y, b_y, ty, arg2)
    return np.ascontiguousarray(ty.T)


def dt_values(grid: np.ndarray, weights) -> np.ndarray:
    """Values of :func:`distance_transform` for a single 2-D map."""
    w = _check(weights)
    return _dt2_values(np.ascontiguousarray(grid, dtype=np.float64), w[0], w[1], w[2], w[3])


def dt_gather(grid: np.ndarray, weights, tx, ty, with_arg: bool = True):
    """Distance transform evaluated at arbitrary integer targets.

    Targets outside the grid are handled by padding the source with
    ``-inf``. Returns values and source coordinates ``(sx, sy)`` shaped
    like the targets.
    """
    grid = np.asarray(grid, dtype=np.float64)
    tx = np.asarray(tx, dtype=np.int64)
    ty = np.asarray(ty, dtype=np.int64)
    H, W = grid.shape
    x0 = min(0, int(tx.min())) if tx.size else 0
    y0 = min(0, int(ty.min())) if ty.size else 0
    x1 = max(W - 1, int(tx.max())) if tx.size else W - 1
    y1 = max(H - 1, int(ty.max())) if ty.size else H - 1
    padded = np.full((y1 - y0 + 1, x1 - x0 + 1), NEG_INF)
    padded[-y0:-y0 + H, -x0:-x0 + W] = grid
    if not with_arg:
        return dt_values(padded, weights)[ty - y0, tx - x0], None, None
    vals, arg = distance_transform(padded, weights)
    v = vals[ty - y0, tx - x0]
    ax = arg[ty - y0, tx - x0, 0]
    ay = arg[ty - y0, tx - x0, 1]
    return v, np.where(ax < 0, -1, ax + x0), np.where(ay < 0, -1, ay + y0)


def _max_and_arg(grid: np.ndarray):
    flat = grid.ravel()
    if flat.size == 0 or not np.isfinite(flat).any():
        return NEG_INF, -1, -1
    i = int(np.argmax(flat))
    y, x = divmod(i, grid.shape[1])
    return float(flat[i]), x, y


def flow_forward(g: np.ndarray, theta: float, flow: np.ndarray):
    """Message into the next frame: ``m(q) = max_l g(l) - theta*||l + F(l) - q||^2``.

    ``flow`` is an integer ``(H, W, 2)`` grid on the lattice of ``g``; the
    output lives on the same lattice. Returns ``(values, src_x, src_y)``.
    """
    g = np.asarray(g, dtype=np.float64)
    H, W = g.shape
    if theta <= 0:
        m, x, y = _max_and_arg(g)
        return np.full((H, W), m), np.full((H, W), x), np.full((H, W), y)
    flow = np.asarray(flow, dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    sx = xx + flow[..., 0]
    sy = yy + flow[..., 1]
    x0 = min(0, int(sx.min()))
    y0 = min(0, int(sy.min()))
    x1 = max(W - 1, int(sx.max()))
    y1 = max(H - 1, int(sy.max()))
    ph, pw = y1 - y0 + 1, x1 - x0 + 1
    vals = g.ravel()
    tgt = ((sy - y0) * pw + (sx - x0)).ravel()
    # max-scatter; among equal values the lowest flat source index wins
    idx = np.flatnonzero(np.isfinite(vals))
    order = np.lexsort((idx, -vals[idx], tgt[idx]))
    ts = tgt[idx][order]
    first = np.ones(ts.size, dtype=bool)
    first[1:] = ts[1:] != ts[:-1]
    win = idx[order][first]
    scat = np.full(ph * pw, NEG_INF)
    owner = np.full(ph * pw, -1, dtype=np.int64)
    scat[tgt[win]] = vals[win]
    owner[tgt[win]] = win
    scat = scat.reshape(ph, pw)
    owner = owner.reshape(ph, pw)
    dtv, arg = distance_transform(scat, (0.0, theta, 0.0, theta))
    v = dtv[-y0:-y0 + H, -x0:-x0 + W]
    ax = arg[-y0:-y0 + H, -x0:-x0 + W, 0]
    ay = arg[-y0:-y0 + H, -x0:-x0 + W, 1]
    src = np.where(ax >= 0, owner[np.maximum(ay, 0), np.maximum(ax, 0)], -1)
    return v, np.where(src >= 0, src % W, -1), np.where(src >= 0, src // W, -1)


def flow_backward(g: np.ndarray, theta: float, flow: np.ndarray, with_arg: bool = True):
    """Message back into frame i: ``m(l) = max_q g(q) - theta*||l + F(l) - q||^2``."""
    g = np.asarray(g, dtype=np.float64)
    H, W = g.shape
    if theta <= 0:
        m, x, y = _max_and_arg(g)
        return np.full((H, W), m), np.full((H, W), x), np.full((H, W), y)
    flow = np.asarray(flow, dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    return dt_gather(g, (0.0, theta, 0.0, theta), xx + flow[..., 0], yy + flow[..., 1], with_arg)


def flow_backward_batch(gs: np.ndarray, theta: float, flow: np.ndarray):
    """:func:`flow_backward` for a stack ``(N, H, W)`` sharing one flow."""
    gs = np.asarray(gs, dtype=np.float64)
    N, H, W = gs.shape
    if theta <= 0:
        flat = gs.reshape(N, -1)
        idx = np.argmax(flat, axis=1)
        m = flat[np.arange(N), idx]
        m = np.where(np.isfinite(m), m, NEG_INF)
        ys, xs = np.divmod(idx, W)
        ok = np.isfinite(m)
        shape = (N, H, W)
        return (np.broadcast_to(m[:, None, None], shape).copy(),
                np.broadcast_to(np.where(ok, xs, -1)[:, None, None], shape).copy(),
                np.broadcast_to(np.where(ok, ys, -1)[:, None, None], shape).copy())
    flow = np.asarray(flow, dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    tx = xx + flow[..., 0]
    ty = yy + flow[..., 1]
    x0 = min(0, int(tx.min()))
    y0 = min(0, int(ty.min()))
    x1 = max(W - 1, int(tx.max()))
    y1 = max(H - 1, int(ty.max()))
    padded = np.full((N, y1 - y0 + 1, x1 - x0 + 1), NEG_INF)
    padded[:, -y0:-y0 + H, -x0:-x0 + W] = gs
    vals, arg = distance_transform(padded, (0.0, theta, 0.0, theta))
    v = vals[:, ty - y0, tx - x0]
    ax = arg[:, ty - y0, tx - x0, 0]
    ay = arg[:, ty - y0, tx - x0, 1]
    return v, np.where(ax < 0, -1, ax + x0), np.where(ay < 0, -1, ay + y0)


def scatter_dt(h: np.ndarray, mult: int, anchor, weights, out_shape):
    """``out(l) = max_c h(c) - w . phi(l - (mult*c + anchor))`` on a lattice
    of ``out_shape = (H, W)``; ``phi`` is the (dx, dx^2, dy, dy^2) feature."""
    h = np.asarray(h, dtype=np.float64)
    Hh, Wh = h.shape
    H, W = out_shape
    tx = np.arange(Wh) * mult + anchor[0]
    ty = np.arange(Hh) * mult + anchor[1]
    x0, y0 = min(0, int(tx[0])), min(0, int(ty[0]))
    x1, y1 = max(W - 1, int(tx[-1])), max(H - 1, int(ty[-1]))
    canvas = np.full((y1 - y0 + 1, x1 - x0 + 1), NEG_INF)
    canvas[np.ix_(ty - y0, tx - x0)] = h
    vals = dt_values(canvas, weights)
    return vals[-y0:-y0 + H, -x0:-x0 + W]


def flip_linear(weights) -> np.ndarray:
    """Weights for ``max_l g(l) - w . phi(l - t)`` evaluated through
    :func:`distance_transform`, whose displacement is ``t - l``."""
    w = np.asarray(weights, dtype=np.float64)
    return np.array([-w[0], w[1], -w[2], w[3]])
