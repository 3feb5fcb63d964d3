"""Temporal part-status descriptors, VLAD encoding and one-vs-rest fluent
classifiers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .data import FLUENTS, is_light, vocabulary
from .learning import train_linear_svm
from .tracking import PartTrack, viterbi_link


# ------------------------------------------------------------------- TPS


def tps_layout(parts: Sequence[str]) -> dict:
    """Offsets of each part's block: name -> (start, z, has_light)."""
    out, pos = {}, 0
    for p in parts:
        z = len(vocabulary(p))
        light = is_light(p)
        out[p] = (pos, z, light)
        pos += z + z * z + 2 + int(light)
    out["__dim__"] = pos
    return out


def _mean_intensity(frame, box) -> float:
    px = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame, dtype=np.float64)
    H, W = px.shape
    x, y, w, h = (int(round(v)) for v in box)
    x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    return float(px[y0:y1, x0:x1].mean())


def extract_tps(tracks: dict, frames=None, parts: Sequence[str] | None = None) -> np.ndarray:
    """One descriptor per consecutive pair of tracked frames, shape (N-1, D).

    ``tracks`` maps part name to :class:`PartTrack`; all tracks must cover
    the same frames. ``frames[f]`` (pixels) feeds the light intensity
    differences; without frames those entries are 0.
    """
    parts = sorted(tracks) if parts is None else list(parts)
    lay = tps_layout(parts)
    ref = None
    for p in parts:
        if p not in tracks:
            raise ValueError(f"no track for part {p}")
        fr = [q.frame for q in tracks[p].proposals]
        if ref is None:
            ref = fr
        elif fr != ref:
            missing = sorted(set(ref) ^ set(fr))
            raise ValueError(f"track {p} does not cover the same frames (differs at {missing})")
    if ref is None or len(ref) < 2:
        raise ValueError("need at least two tracked frames")
    out = np.zeros((len(ref) - 1, lay["__dim__"]))
    for p in parts:
        start, z, light = lay[p]
        vocab = vocabulary(p)
        props = tracks[p].proposals
        for i, (a, b) in enumerate(zip(props[:-1], props[1:])):
            sa, sb = vocab.index(a.status), vocab.index(b.status)
            out[i, start + sa] = 1.0
            out[i, start + z + sa * z + sb] = 1.0
            s = a.scale if a.scale > 0 else 1.0
            (ax, ay), (bx, by) = a.center, b.center
            out[i, start + z + z * z] = (bx - ax) / s
            out[i, start + z + z * z + 1] = (by - ay) / s
            if light and frames is not None:
                out[i, start + z + z * z + 2] = (_mean_intensity(frames[b.frame], b.box)
                                                 - _mean_intensity(frames[a.frame], a.box))
    return out


def link_tracks(proposals, parts: Sequence[str], theta, lam: float = 1.0) -> dict:
    """Viterbi track per part from a :class:`ProposalSet`."""
    return {p: viterbi_link(proposals.sequence(p), theta, lam, p) for p in parts}


TRACK_THETA = (0.0, 1.0, 0.0, 1.0, 0.0, 1.0)


def video_locals(g, frames, parts: Sequence[str], stride: int = 2, topk: int = 5,
                 theta=TRACK_THETA, lam: float = 1.0, cell_size: int = 4,
                 max_levels: int | None = 1, flow_radius: int = 1, workers: int = 1):
    """Detect, track and describe one video; returns (locals, tracks).

    With stride 2 every frame belongs to exactly one processed pair.
    """
    from .inference.detect import DetectConfig, detect
    from .learning import make_sample
    smp = make_sample(frames, None, stride, cell_size, max_levels, flow_radius)
    dcfg = DetectConfig(tau=-np.inf, topk=topk, stride=stride)
    _, props = detect(g, smp.feat_list(), smp.flow_list(), dcfg, workers=workers)
    tracks = link_tracks(props, parts, theta, lam)
    return extract_tps(tracks, frames, parts), tracks


# ----------------------------------------------------------------- codebook


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, d') in the projected space
    mean: np.ndarray | None = None  # (d,)
    basis: np.ndarray | None = None  # (d, d') orthonormal columns

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0] if self.basis is not None else self.centroids.shape[1]

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"descriptors have shape {X.shape}, codebook expects dim {self.input_dim}")
        if self.basis is None:
            return X
        return (X - self.mean) @ self.basis

    def to_dict(self) -> dict:
        return {"centroids": self.centroids.tolist(),
                "mean": None if self.mean is None else self.mean.tolist(),
                "basis": None if self.basis is None else self.basis.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Codebook":
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
        return cls(np.asarray(d["centroids"], dtype=np.float64), arr(d["mean"]), arr(d["basis"]))


def pca_basis(X: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-``dim`` eigenvectors of the covariance (sign fixed so the
    largest-magnitude entry of each column is positive)."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    cov = np.cov(X - mu, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:dim]
    B = vecs[:, order]
    idx = np.argmax(np.abs(B), axis=0)
    B = B * np.sign(B[idx, np.arange(B.shape[1])])
    return mu, B


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           rtol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations from a seeded k-means++ start; stops when the
    relative inertia change drops below ``rtol``."""
    X = np.asarray(X, dtype=np.float64)
    C, _ = kmeans_plusplus(X, k, random_state=seed)
    prev = np.inf
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        lab = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(X)), lab].sum())
        for j in range(k):
            m = lab == j
            if m.any():
                C[j] = X[m].mean(axis=0)
        if prev < np.inf and abs(prev - inertia) <= rtol * max(prev, 1e-300):
            break
        if inertia == 0.0:
            break
        prev = inertia
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    lab = np.argmin(d2, axis=1)
    return C, lab, float(d2[np.arange(len(X)), lab].sum())


def train_codebook(locals_: np.ndarray, k: int = 8, pca_dim: int | float | None = 0.5,
                   seed: int = 7) -> Codebook:
    """``pca_dim``: int dimension, fraction of the input dimension, or None."""
    X = np.asarray(locals_, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("locals must be a 2-D array")
    if len(np.unique(X, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct descriptors, got {len(np.unique(X, axis=0))}")
    mean = basis = None
    if pca_dim is not None:
        dim = int(round(pca_dim * X.shape[1])) if isinstance(pca_dim, float) else int(pca_dim)
        dim = max(1, min(dim, X.shape[1]))
        mean, basis = pca_basis(X, dim)
        X = (X - mean) @ basis
    C, _, _ = kmeans(X, k, seed)
    return Codebook(C, mean, basis)


def vlad_raw(locals_: np.ndarray, codebook: Codebook) -> np.ndarray:
    Z = codebook.project(locals_)
    C = codebook.centroids
    d2 = ((Z[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    lab = np.argmin(d2, axis=1)
    V = np.zeros_like(C)
    np.add.at(V, lab, Z - C[lab])
    return V.ravel()


def power_l2(v: np.ndarray) -> np.ndarray:
    v = np.sign(v) * np.sqrt(np.abs(v))
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def vlad_encode(locals_: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Hard-assignment VLAD with signed square root and L2 normalization."""
    return power_l2(vlad_raw(locals_, codebook))


def concat_descriptors(a, b, normalize: bool = True) -> np.ndarray:
    v = np.concatenate([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)])
    return power_l2(v) if normalize else v


# -------------------------------------------------------------- classifier


@dataclass
class FluentModel:
    labels: list[str]
    weights: np.ndarray  # (n_classes, d)
    biases: np.ndarray  # (n_classes,)
    codebook: Codebook | None = None
    parts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "weights": self.weights.tolist(),
                "biases": self.biases.tolist(), "parts": list(self.parts),
                "codebook": None if self.codebook is None else self.codebook.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "FluentModel":
        cb = None if d.get("codebook") is None else Codebook.from_dict(d["codebook"])
        return cls(list(d["labels"]), np.asarray(d["weights"], dtype=np.float64),
                   np.asarray(d["biases"], dtype=np.float64), cb, list(d.get("parts", [])))


def train_fluent(descriptors, labels: Sequence[str], C: float = 1.0, seed: int = 7,
                 classes: Sequence[str] | None = None, epochs: int = 10000) -> FluentModel:
    """One binary hinge classifier per class present in ``labels``."""
    X = np.asarray(descriptors, dtype=np.float64)
    classes = [c for c in (classes or FLUENTS) if c in set(labels)]
    if len(classes) < 2:
        raise ValueError("need at least two classes to train")
    y = np.asarray(labels)
    W = np.zeros((len(classes), X.shape[1]))
    b = np.zeros(len(classes))
    for j, c in enumerate(classes):
        W[j], b[j] = train_linear_svm(X, np.where(y == c, 1.0, -1.0), C, epochs, seed)
    return FluentModel(classes, W, b)


def classify(model: FluentModel, descriptor) -> tuple[str, np.ndarray]:
    s = model.weights @ np.asarray(descriptor, dtype=np.float64) + model.biases
    return model.labels[int(np.argmax(s))], s


def confusion_and_mp(predictions: Sequence[int], truths: Sequence[int],
                     class_count: int) -> tuple[np.ndarray, float]:
    """Row-normalized confusion (rows = truth) and the mean of its diagonal
    over populated classes."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    M = np.zeros((class_count, class_count))
    for p, t in zip(predictions, truths):
        if not (0 <= p < class_count and 0 <= t < class_count):
            raise ValueError(f"label out of range: {p}, {t}")
        M[t, p] += 1
    rows = M.sum(axis=1)
    pop = rows > 0
    M[pop] /= rows[pop, None]
    mp = float(np.mean(np.diag(M)[pop])) if pop.any() else 0.0
    return M, mp


def save_fluent_model(model: FluentModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_fluent_model(path) -> FluentModel:
    return FluentModel.from_dict(json.loads(Path(path).read_text()))
