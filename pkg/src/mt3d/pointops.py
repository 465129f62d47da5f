"""Point clouds, farthest point sampling, KNN and the mini-PointNet tokenizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import macs
from .config import Config


@dataclass
class Cloud:
    points: np.ndarray                    # (N, 3) float64
    intensity: np.ndarray | None = None   # (N,) in [0, 1]

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite coordinates")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(self.intensity) != len(self.points):
                raise ValueError(
                    f"intensity length {len(self.intensity)} != point count {len(self.points)}")
            if np.any(self.intensity < 0) or np.any(self.intensity > 1):
                raise ValueError("intensity values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_idx) -> "Cloud":
        inten = None if self.intensity is None else self.intensity[mask_or_idx]
        return Cloud(self.points[mask_or_idx], inten)


@dataclass(frozen=True)
class NeighborIndex:
    idx: np.ndarray      # (Q, k) indices into the reference set
    padded: bool         # True when the reference set had fewer than k points


@dataclass
class TokenizerWeights:
    w1: np.ndarray  # (3, C/2)
    b1: np.ndarray  # (C/2,)
    w2: np.ndarray  # (C/2, C)
    b2: np.ndarray  # (C,)

    def check(self, channels: int) -> None:
        half = channels // 2
        want = {"w1": (3, half), "b1": (half,), "w2": (half, channels), "b2": (channels,)}
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"tokenizer weight {name} has shape {got}, expected {shape}")


def _as_points(c) -> np.ndarray:
    return np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)


def lexmin_index(points) -> int:
    """Lowest index of the lexicographically smallest point (x, then y, then z)."""
    p = _as_points(points)
    if len(p) == 0:
        raise ValueError("empty input cloud")
    return int(np.lexsort((p[:, 2], p[:, 1], p[:, 0]))[0])


def fps(c, n: int, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling, returned in selection order.

    When the cloud holds fewer than ``n`` points every point is taken once and
    the selection is then repeated cyclically.
    """
    p = _as_points(c)
    N = len(p)
    if N == 0:
        raise ValueError("empty input cloud")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if start is None:
        start = lexmin_index(p)
    if not 0 <= start < N:
        raise IndexError(f"start index {start} out of range for {N} points")
    m = min(n, N)
    out = np.empty(n, dtype=np.int64)
    out[0] = start
    d = np.sum((p - p[start]) ** 2, axis=1)
    d[start] = -1.0
    for i in range(1, m):
        j = int(np.argmax(d))
        out[i] = j
        d = np.minimum(d, np.sum((p - p[j]) ** 2, axis=1))
        d[j] = -1.0
    macs.add(3 * N * m, "fps")
    for i in range(m, n):
        out[i] = out[i % m]
    return out


def sq_dists(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    d = (queries[:, None, 0] - refs[None, :, 0]) ** 2
    d += (queries[:, None, 1] - refs[None, :, 1]) ** 2
    d += (queries[:, None, 2] - refs[None, :, 2]) ** 2
    return d


def knn(queries, refs, k: int) -> NeighborIndex:
    """k nearest references per query; ties go to the smaller index."""
    q = _as_points(queries)
    r = _as_points(refs)
    R = len(r)
    if R == 0:
        raise ValueError("empty reference set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    d = sq_dists(q, r)
    macs.add(3 * len(q) * R, "knn")
    if R <= k:
        order = np.argsort(d, axis=1, kind="stable")
        cols = np.arange(k) % R
        return NeighborIndex(order[:, cols], padded=R < k)
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d, part, axis=1)
    kth = pd.max(axis=1)
    ambiguous = np.flatnonzero((d <= kth[:, None]).sum(axis=1) > k)
    sel = np.lexsort((part, pd), axis=-1)
    idx = np.take_along_axis(part, sel, axis=1)
    for row in ambiguous:
        idx[row] = np.argsort(d[row], kind="stable")[:k]
    return NeighborIndex(idx, padded=False)


def init_tokenizer(channels: int, rng: np.random.Generator) -> TokenizerWeights:
    half = channels // 2
    return TokenizerWeights(
        w1=rng.normal(0.0, np.sqrt(2.0 / 3), (3, half)),
        b1=np.zeros(half),
        w2=rng.normal(0.0, np.sqrt(2.0 / half), (half, channels)),
        b2=np.zeros(channels),
    )


def embed_groups(rel: np.ndarray, w: TokenizerWeights) -> np.ndarray:
    """Shared two-layer point MLP on relative coordinates, max-pooled per group."""
    hidden = np.maximum(rel @ w.w1 + w.b1, 0.0)
    feats = hidden @ w.w2 + w.b2
    return feats.max(axis=-2)


def tokenize(c, cfg: Config, w: TokenizerWeights) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``cfg.n_tokens`` centres by FPS and embed each local group.

    Returns token coordinates (N, 3) in selection order and features (N, C).
    """
    w.check(cfg.channels)
    p = _as_points(c)
    if len(p) == 0:
        raise ValueError("empty input cloud")
    start = None
    if cfg.fps_random:
        start = int(np.random.default_rng(cfg.fps_seed).integers(len(p)))
    sel = fps(p, cfg.n_tokens, start)
    centers = p[sel]
    groups = knn(centers, p, cfg.group_size).idx
    rel = p[groups] - centers[:, None, :]
    half = cfg.channels // 2
    macs.add(cfg.n_tokens * cfg.group_size * (3 * half + half * cfg.channels), "tokenize")
    return centers, embed_groups(rel, w)
