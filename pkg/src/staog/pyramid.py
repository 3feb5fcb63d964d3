"""Multi-scale appearance feature pyramids and motion-flow pyramids.

Grids are stored as ``(H, W, C)`` float arrays (y-major, then x, then
channel), which is also the on-disk order of the tensor file format.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from skimage.transform import resize

TENSOR_MAGIC = b"STAT"
TENSOR_VERSION = 1


@dataclass
class Frame:
    pixels: np.ndarray  # (H, W) grayscale in [0, 1]
    index: int = 0
    timestamp: float | None = None

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]
    scales: list[float]
    cell_size: int
    interval: int

    def dims(self, level: int) -> tuple[int, int]:
        """(W, H) of a level in cells."""
        g = self.levels[level]
        return g.shape[1], g.shape[0]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    def __len__(self):
        return len(self.levels)


@dataclass
class FlowPyramid:
    levels: list[np.ndarray]  # (H, W, 2): (u, v) in cells/frame of that level
    scales: list[float]
    cell_size: int
    interval: int = 1
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.levels)

    def rounded(self, level: int) -> np.ndarray:
        return np.rint(self.levels[level]).astype(np.int64)


def _as_pixels(frame) -> np.ndarray:
    if isinstance(frame, Frame):
        return frame.pixels
    return np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)


def _pad_to_cells(img: np.ndarray, cell_size: int) -> np.ndarray:
    h, w = img.shape
    ph = (-h) % cell_size
    pw = (-w) % cell_size
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    return img


def extract_features(frame, cell_size: int = 4, n_orient: int = 9,
                     intensity: bool = True) -> np.ndarray:
    """Oriented-gradient histogram per cell plus a mean-intensity channel.

    Unsigned orientations are soft-binned between the two nearest bin
    centres and weighted by gradient magnitude. Each cell vector is scaled
    down to unit L2 norm when its norm exceeds one, so a flat region keeps
    its raw intensity.
    """
    if cell_size < 2:
        raise ValueError("cell_size must be >= 2")
    img = _as_pixels(frame)
    if img.shape[0] < cell_size or img.shape[1] < cell_size:
        raise ValueError(f"frame {img.shape} smaller than one {cell_size}px cell")
    img = _pad_to_cells(img, cell_size)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    pos = ang / (np.pi / n_orient) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % n_orient
    hi = (lo + 1) % n_orient

    h, w = img.shape
    hc, wc = h // cell_size, w // cell_size
    hist = np.zeros((h, w, n_orient))
    rows, cols = np.indices((h, w))
    np.add.at(hist, (rows, cols, lo), mag * (1.0 - frac))
    np.add.at(hist, (rows, cols, hi), mag * frac)
    hist = hist.reshape(hc, cell_size, wc, cell_size, n_orient).sum(axis=(1, 3))

    parts = [hist]
    if intensity:
        mean_i = img.reshape(hc, cell_size, wc, cell_size).mean(axis=(1, 3))
        parts.append(mean_i[..., None])
    feat = np.concatenate(parts, axis=2)
    norm = np.linalg.norm(feat, axis=2, keepdims=True)
    feat = np.where(norm > 1.0, feat / np.maximum(norm, 1e-300), feat)
    return feat


def downsample2(img: np.ndarray) -> np.ndarray:
    """Halve resolution by 2x2 block averaging (odd edges replicated)."""
    img = np.asarray(img, dtype=np.float64)
    img = _pad_to_cells(img, 2)
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def build_pyramid(frame, cell_size: int = 4, interval: int = 1,
                  min_level_cells: int = 2,
                  extractor: Callable[..., np.ndarray] | None = None,
                  max_levels: int | None = None) -> FeaturePyramid:
    """Feature pyramid with scales ``2**(-k/interval)``.

    The first ``interval`` levels are resampled from the source frame; every
    later level is the 2x2 average of the image one octave finer. Stops once
    a level has fewer than ``min_level_cells`` cells along either axis.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    img = _as_pixels(frame)
    extractor = extractor or (lambda im: extract_features(im, cell_size))
    images: list[np.ndarray] = []
    levels, scales = [], []
    k = 0
    while max_levels is None or k < max_levels:
        s = 2.0 ** (-k / interval)
        if k < interval:
            if k == 0:
                im = img
            else:
                shape = (math.ceil(img.shape[0] * s), math.ceil(img.shape[1] * s))
                im = resize(img, shape, order=1, anti_aliasing=True, mode="edge")
        else:
            im = downsample2(images[k - interval])
        hc = math.ceil(im.shape[0] / cell_size)
        wc = math.ceil(im.shape[1] / cell_size)
        if hc < min_level_cells or wc < min_level_cells or min(im.shape) < cell_size:
            break
        images.append(im)
        levels.append(extractor(im))
        scales.append(s)
        k += 1
    return FeaturePyramid(levels=levels, scales=scales, cell_size=cell_size,
                          interval=interval)


def _box_sum(a: np.ndarray, cell_size: int, block: int) -> np.ndarray:
    """Sum of ``a`` over a block x block cell neighbourhood of every cell."""
    h, w = a.shape
    hc, wc = h // cell_size, w // cell_size
    cells = a.reshape(hc, cell_size, wc, cell_size).sum(axis=(1, 3))
    r = block // 2
    padded = np.pad(cells, r)
    ii = padded.cumsum(0).cumsum(1)
    ii = np.pad(ii, ((1, 0), (1, 0)))
    return (ii[block:, block:] - ii[:-block, block:] - ii[block:, :-block]
            + ii[:-block, :-block])[:hc, :wc]


def estimate_flow(frame_a, frame_b, cell_size: int = 4, block: int = 1,
                  search_radius: int = 2) -> np.ndarray:
    """Block-matching flow, one (u, v) per cell in cells/frame.

    Every pixel displacement up to ``search_radius`` cells is tried; the
    cost is the mean absolute difference over the overlapping part of a
    ``block`` x ``block`` cell neighbourhood. Ties go to the smallest
    displacement, then lexicographic (u, v).
    """
    a = _as_pixels(frame_a)
    b = _as_pixels(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame size mismatch {a.shape} vs {b.shape}")
    if block < 1 or block % 2 == 0:
        raise ValueError("block must be a positive odd number of cells")
    a = _pad_to_cells(a, cell_size)
    b = _pad_to_cells(b, cell_size)
    h, w = a.shape
    hc, wc = h // cell_size, w // cell_size
    rpx = search_radius * cell_size
    cands = [(dx, dy) for dx in range(-rpx, rpx + 1) for dy in range(-rpx, rpx + 1)]
    cands.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))

    best = np.full((hc, wc), np.inf)
    flow = np.zeros((hc, wc, 2))
    for dx, dy in cands:
        # compare a(y, x) with b(y + dy, x + dx)
        diff = np.zeros((h, w))
        valid = np.zeros((h, w))
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        yt = slice(ys.start + dy, ys.stop + dy)
        xt = slice(xs.start + dx, xs.stop + dx)
        if ys.start >= ys.stop or xs.start >= xs.stop:
            continue
        diff[ys, xs] = np.abs(a[ys, xs] - b[yt, xt])
        valid[ys, xs] = 1.0
        num = _box_sum(diff, cell_size, block)
        cnt = _box_sum(valid, cell_size, block)
        with np.errstate(invalid="ignore", divide="ignore"):
            cost = np.where(cnt > 0, num / np.maximum(cnt, 1), np.inf)
        better = cost < best
        best[better] = cost[better]
        flow[better, 0] = dx / cell_size
        flow[better, 1] = dy / cell_size
    return flow


def flow_pyramid(flow0: np.ndarray, pyramid: FeaturePyramid) -> FlowPyramid:
    """Propagate level-0 flow to every level of ``pyramid``.

    A coarse cell averages the fine cells whose centres fall inside it and
    scales the result by the resolution ratio.
    """
    flow0 = np.asarray(flow0, dtype=np.float64)
    h0, w0 = flow0.shape[:2]
    if (w0, h0) != pyramid.dims(0):
        raise ValueError(f"flow grid {(w0, h0)} does not match level 0 {pyramid.dims(0)}")
    levels = [flow0.copy()]
    for k in range(1, len(pyramid)):
        s = pyramid.scales[k]
        wk, hk = pyramid.dims(k)
        ys = np.minimum(np.floor((np.arange(h0) + 0.5) * s).astype(int), hk - 1)
        xs = np.minimum(np.floor((np.arange(w0) + 0.5) * s).astype(int), wk - 1)
        acc = np.zeros((hk, wk, 2))
        cnt = np.zeros((hk, wk))
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        np.add.at(acc, (yy, xx), flow0)
        np.add.at(cnt, (yy, xx), 1.0)
        empty = cnt == 0
        if empty.any():
            ey, ex = np.nonzero(empty)
            src_y = np.minimum((ey / s).astype(int), h0 - 1)
            src_x = np.minimum((ex / s).astype(int), w0 - 1)
            acc[ey, ex] = flow0[src_y, src_x]
            cnt[ey, ex] = 1.0
        levels.append(acc / cnt[..., None] * s)
    return FlowPyramid(levels=levels, scales=list(pyramid.scales),
                       cell_size=pyramid.cell_size, interval=pyramid.interval)


def filter_response(grid: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Correlate a ``(h, w, C)`` template with a ``(H, W, C)`` grid.

    Entry (y, x) is the dot product of the template with the window whose
    top-left cell is (x, y); output shape is ``(H-h+1, W-w+1)``.
    """
    h, w, c = template.shape
    H, W, C = grid.shape
    if c != C:
        raise ValueError(f"channel mismatch: template {c}, grid {C}")
    if h > H or w > W:
        raise ValueError(f"template {w}x{h} larger than grid {W}x{H}")
    win = sliding_window_view(grid, (h, w), axis=(0, 1))  # (H-h+1, W-w+1, C, h, w)
    return np.einsum("yxcij,ijc->yx", win, template, optimize=True)


def window(grid: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    """The ``(h, w, C)`` feature window with top-left cell (x, y)."""
    H, W = grid.shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise IndexError(f"window ({x},{y},{w},{h}) outside {W}x{H} grid")
    return grid[y:y + h, x:x + w]


# ---------------------------------------------------------------- tensor files

def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IIII", TENSOR_VERSION, w, h, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, w, h, c = struct.unpack("<IIII", data[4:20])
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {version}")
    body = np.frombuffer(data, dtype="<f4", offset=20)
    if body.size != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} floats, found {body.size}")
    return body.reshape(h, w, c).astype(np.float64)


def save_pyramid(directory, pyr: FeaturePyramid | FlowPyramid) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    kind = "flow" if isinstance(pyr, FlowPyramid) else "features"
    entries = []
    for k, (lvl, s) in enumerate(zip(pyr.levels, pyr.scales)):
        name = f"level_{k:03d}.stat"
        write_tensor(d / name, lvl)
        entries.append({"file": name, "scale": s})
    manifest = {"kind": kind, "cell_size": pyr.cell_size, "interval": pyr.interval,
                "levels": entries}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_pyramid(directory) -> FeaturePyramid | FlowPyramid:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    levels = [read_tensor(d / e["file"]) for e in manifest["levels"]]
    scales = [float(e["scale"]) for e in manifest["levels"]]
    if manifest["kind"] == "flow":
        return FlowPyramid(levels=levels, scales=scales,
                           cell_size=manifest["cell_size"], interval=manifest["interval"])
    return FeaturePyramid(levels=levels, scales=scales,
                          cell_size=manifest["cell_size"], interval=manifest["interval"])


def video_pyramids(frames: Sequence, cell_size: int = 4, interval: int = 1,
                   min_level_cells: int = 2, flow_block: int = 1,
                   flow_radius: int = 2, max_levels: int | None = None):
    """Feature pyramids for every frame and flow pyramids for every
    consecutive pair (flow ``i`` maps frame ``i`` onto frame ``i+1``)."""
    feats = [build_pyramid(f, cell_size, interval, min_level_cells,
                           max_levels=max_levels) for f in frames]
    flows = []
    for i in range(len(frames) - 1):
        f0 = estimate_flow(frames[i], frames[i + 1], cell_size, flow_block, flow_radius)
        flows.append(flow_pyramid(f0, feats[i]))
    return feats, flows
