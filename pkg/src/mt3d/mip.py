"""Inter-frame propagation: neighbour-weighted history features followed by Bi-SSM layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import macs
from .config import Config
from .gfem import GFEMWeights, grouped_cross_attention, init_gfem
from .memory import MaskEmbedWeights, MemoryBank, fuse_mask, init_mask_embed
from .pointops import TokenizerWeights, init_tokenizer, knn, tokenize
from .ssm import BiSSMStack, bi_ssm_stack, init_layer


@dataclass
class MIPWeights:
    tokenizer: TokenizerWeights
    mask: MaskEmbedWeights
    gfem: GFEMWeights
    ssm: BiSSMStack
    proj_w: np.ndarray  # (2C, C) maps [history ; token] to C channels
    proj_b: np.ndarray  # (C,)
    alpha: np.ndarray   # (C,)
    beta: np.ndarray    # (C,)


def init_mip(cfg: Config, rng: np.random.Generator) -> MIPWeights:
    C = cfg.channels
    return MIPWeights(
        tokenizer=init_tokenizer(C, rng),
        mask=init_mask_embed(C, rng),
        gfem=init_gfem(C, rng),
        ssm=BiSSMStack([init_layer(C, cfg.state_dim, rng) for _ in range(cfg.layers)]),
        proj_w=rng.normal(0.0, 1.0 / np.sqrt(2 * C), (2 * C, C)),
        proj_b=np.zeros(C),
        alpha=np.ones(C),
        beta=np.zeros(C),
    )


def neighbor_logits(nbr_feats: np.ndarray, tokens: np.ndarray, w: MIPWeights) -> np.ndarray:
    """F_hat for every (query, neighbour): alpha * P([F_k ; z_j]) + beta, shape (N, k, C)."""
    C = tokens.shape[1]
    hist = nbr_feats @ w.proj_w[:C]
    cur = tokens @ w.proj_w[C:]
    N, k = nbr_feats.shape[:2]
    macs.add(N * k * C * C + N * C * C, "propagate")
    return w.alpha * (hist + cur[:, None, :] + w.proj_b) + w.beta


def neighbor_weights(F_hat: np.ndarray, scalar: bool = False) -> np.ndarray:
    """Softmax over the neighbour axis, per channel unless ``scalar``."""
    logits = F_hat.mean(axis=-1, keepdims=True) if scalar else F_hat
    s = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(s)
    omega = e / e.sum(axis=1, keepdims=True)
    return np.broadcast_to(omega, F_hat.shape)


def propagate(Q_t, tokens, Q_bar, F, cfg: Config, w: MIPWeights,
              return_weights: bool = False):
    """Propagate history features onto the current tokens.

    ``tokens`` is the plain token embedding or its GFEM-enhanced version.
    """
    Q_t = np.asarray(Q_t, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if len(Q_bar) == 0 or len(F) == 0:
        raise ValueError("empty history")
    if len(Q_bar) != len(F):
        raise ValueError(f"history coordinates ({len(Q_bar)}) and features ({len(F)}) differ")
    if len(tokens) != len(Q_t):
        raise ValueError(f"{len(tokens)} token rows for {len(Q_t)} token coordinates")
    nb = knn(Q_t, Q_bar, cfg.k).idx
    F_hat = neighbor_logits(F[nb], tokens, w)
    omega = neighbor_weights(F_hat, cfg.scalar_softmax)
    E = np.sum(omega * F_hat, axis=1)
    if return_weights:
        return E, omega, nb
    return E


def history(bank: MemoryBank, cfg: Config):
    """Concatenate the newest ``cfg.memory_size`` frames and fuse their masks."""
    if len(bank) == 0:
        raise ValueError("empty memory bank")
    frames = bank.frames[-cfg.memory_size:]
    Q_bar = np.concatenate([f.Q for f in frames])
    E_bar = np.concatenate([f.E for f in frames])
    M_bar = np.concatenate([f.M for f in frames])
    return Q_bar, E_bar, M_bar


def mip_forward(cloud, bank: MemoryBank, cfg: Config, w: MIPWeights):
    """Tokenize, fuse memory, optionally enhance, propagate, then run the Bi-SSM stack.

    Token coordinates and history must already share one frame of reference.
    """
    Q_t, Z_t = tokenize(cloud, cfg, w.tokenizer)
    Q_bar, E_bar, M_bar = history(bank, cfg)
    F = fuse_mask(E_bar, M_bar, w.mask, cfg.use_geometry, cfg.use_mask)
    tokens = Z_t
    if cfg.use_gfem:
        keys = E_bar if cfg.gfem_strict else F
        tokens = grouped_cross_attention(Z_t, keys, w.gfem, cfg.gfem_scale)
    E = propagate(Q_t, tokens, Q_bar, F, cfg, w)
    return Q_t, bi_ssm_stack(w.ssm, E, layers=cfg.layers)


def encode_first_frame(cloud, cfg: Config, w: MIPWeights):
    """Frame-one path: no history to propagate from, so tokens go straight to the Bi-SSM."""
    Q, Z = tokenize(cloud, cfg, w.tokenizer)
    return Q, bi_ssm_stack(w.ssm, Z, layers=cfg.layers)


def _ssm_macs(T: int, C: int, d: int) -> int:
    gate = T * C * C
    prep = T * C * (C + 2 * d) + 4 * T * C * d
    return gate + prep + 2 * T * C * d + T * C * d


def flops_mip(cfg: Config, n_points: int, history_frames: int | None = None) -> int:
    """Closed-form multiply-accumulate count of one ``mip_forward`` call."""
    N, C, d, k = cfg.n_tokens, cfg.channels, cfg.state_dim, cfg.k
    if n_points < N:
        raise ValueError(f"n_points ({n_points}) must be >= n_tokens ({N})")
    rho = cfg.memory_size if history_frames is None else min(history_frames, cfg.memory_size)
    M = rho * N
    half = C // 2
    total = 3 * n_points * N                                  # farthest point sampling
    total += 3 * N * n_points                                 # tokenizer grouping
    total += N * cfg.group_size * (3 * half + half * C)       # point MLP
    total += M * C                                            # mask fusion
    if cfg.use_gfem:
        total += 2 * ((N + 2 * M) * half * half + 2 * N * M * half)
    total += 3 * N * M                                        # history KNN
    total += N * k * C * C + N * C * C                        # neighbour projection
    total += cfg.layers * 2 * _ssm_macs(N, C, d)
    return int(total)
