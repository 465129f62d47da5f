"""Grouped feature enhancement: channel-split cross-attention against history."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import macs


@dataclass
class GroupWeights:
    wq: np.ndarray  # (C/2, C/2)
    wk: np.ndarray
    wv: np.ndarray


@dataclass
class GFEMWeights:
    groups: tuple[GroupWeights, GroupWeights]

    def check(self, channels: int) -> None:
        half = channels // 2
        for gi, g in enumerate(self.groups):
            for name in ("wq", "wk", "wv"):
                shape = getattr(g, name).shape
                if shape != (half, half):
                    raise ValueError(f"group {gi} {name} has shape {shape}, expected {(half, half)}")


def init_gfem(channels: int, rng: np.random.Generator) -> GFEMWeights:
    half = channels // 2
    std = 1.0 / np.sqrt(half)
    return GFEMWeights(tuple(
        GroupWeights(*(rng.normal(0.0, std, (half, half)) for _ in range(3)))
        for _ in range(2)))


def split_channels(X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X)
    C = X.shape[-1]
    if C % 2:
        raise ValueError(f"cannot split an odd channel count ({C})")
    return X[..., : C // 2], X[..., C // 2:]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def group_attention(Zg, Eg, g: GroupWeights, scale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Single-head cross attention for one channel group; returns (output, attention)."""
    q = Zg @ g.wq
    k = Eg @ g.wk
    v = Eg @ g.wv
    logits = q @ k.T
    if scale:
        logits = logits / np.sqrt(Zg.shape[1])
    attn = softmax_rows(logits)
    n, m, c = len(Zg), len(Eg), Zg.shape[1]
    macs.add((n + 2 * m) * c * c + 2 * n * m * c, "gfem")
    return attn @ v, attn


def grouped_cross_attention(Z, E_hist, w: GFEMWeights, scale: bool = True) -> np.ndarray:
    """Attend current tokens (N, C) to history rows (M, C) separately per channel half."""
    Z = np.asarray(Z, dtype=np.float64)
    E_hist = np.asarray(E_hist, dtype=np.float64)
    if Z.ndim != 2 or E_hist.ndim != 2 or Z.shape[1] != E_hist.shape[1]:
        raise ValueError(f"shape mismatch: tokens {Z.shape} vs history {E_hist.shape}")
    if len(E_hist) == 0:
        raise ValueError("empty history")
    w.check(Z.shape[1])
    z1, z2 = split_channels(Z)
    e1, e2 = split_channels(E_hist)
    out1, _ = group_attention(z1, e1, w.groups[0], scale)
    out2, _ = group_attention(z2, e2, w.groups[1], scale)
    return np.concatenate([out1, out2], axis=1)
