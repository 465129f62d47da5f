"""FIFO memory bank of past frames and mask-aware feature fusion."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import macs


@dataclass
class MemoryFrame:
    Q: np.ndarray  # (N, 3) token coordinates
    E: np.ndarray  # (N, C) token features
    M: np.ndarray  # (N, 1) soft target mask

    def __post_init__(self) -> None:
        self.Q = np.asarray(self.Q, dtype=np.float64).reshape(-1, 3)
        self.E = np.asarray(self.E, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64).reshape(-1, 1)
        n = len(self.Q)
        if self.E.ndim != 2 or len(self.E) != n or len(self.M) != n:
            raise ValueError(
                f"row counts differ: Q={len(self.Q)} E={self.E.shape} M={len(self.M)}")
        if np.any(self.M < 0) or np.any(self.M > 1):
            raise ValueError("mask entries must lie in [0, 1]")


class MemoryBank:
    """Holds at most ``capacity`` frames, oldest first, with strictly increasing timestamps."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._frames: deque[tuple[int, MemoryFrame]] = deque()

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def frames(self) -> list[MemoryFrame]:
        return [f for _, f in self._frames]

    @property
    def timestamps(self) -> list[int]:
        return [t for t, _ in self._frames]

    def push(self, frame: MemoryFrame, t: int) -> "MemoryBank":
        if self._frames and t <= self._frames[-1][0]:
            raise ValueError(
                f"timestamp {t} is not after the last stored timestamp {self._frames[-1][0]}")
        self._frames.append((t, frame))
        while len(self._frames) > self.capacity:
            self._frames.popleft()
        return self

    def copy(self) -> "MemoryBank":
        out = MemoryBank(self.capacity)
        out._frames = deque(self._frames)
        return out

    def mapped(self, fn) -> "MemoryBank":
        """New bank whose frame coordinates are transformed by ``fn``."""
        out = MemoryBank(self.capacity)
        out._frames = deque((t, MemoryFrame(fn(f.Q), f.E, f.M)) for t, f in self._frames)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"bank.timestamps": np.array(self.timestamps, dtype=np.float64)}
        for i, f in enumerate(self.frames):
            state[f"bank.{i}.Q"] = f.Q
            state[f"bank.{i}.E"] = f.E
            state[f"bank.{i}.M"] = f.M
        return state

    @classmethod
    def from_state(cls, capacity: int, state: dict[str, np.ndarray]) -> "MemoryBank":
        bank = cls(capacity)
        for i, t in enumerate(np.asarray(state["bank.timestamps"]).reshape(-1)):
            frame = MemoryFrame(state[f"bank.{i}.Q"], state[f"bank.{i}.E"], state[f"bank.{i}.M"])
            bank.push(frame, int(t))
        return bank


def push(bank: MemoryBank, frame: MemoryFrame, t: int) -> MemoryBank:
    return bank.push(frame, t)


def concat_bank(bank: MemoryBank) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack stored frames oldest to newest into (Q_bar, E_bar, M_bar)."""
    if len(bank) == 0:
        raise ValueError("empty memory bank")
    frames = bank.frames
    return (np.concatenate([f.Q for f in frames]),
            np.concatenate([f.E for f in frames]),
            np.concatenate([f.M for f in frames]))


@dataclass
class MaskEmbedWeights:
    """Width-1 convolution from the mask channel to C feature channels."""

    weight: np.ndarray  # (C,)
    bias: np.ndarray    # (C,)

    def __call__(self, M: np.ndarray) -> np.ndarray:
        M = np.asarray(M, dtype=np.float64).reshape(-1, 1)
        return M * self.weight[None, :] + self.bias[None, :]


def init_mask_embed(channels: int, rng: np.random.Generator) -> MaskEmbedWeights:
    return MaskEmbedWeights(rng.normal(0.0, 1.0, channels), np.zeros(channels))


def fuse_mask(E_bar, M_bar, w: MaskEmbedWeights, use_geometry: bool = True,
              use_mask: bool = True) -> np.ndarray:
    """F = E_bar + phi_mask(M_bar); either term can be switched off for ablations."""
    E_bar = np.asarray(E_bar, dtype=np.float64)
    M_bar = np.asarray(M_bar, dtype=np.float64).reshape(-1, 1)
    if len(E_bar) != len(M_bar):
        raise ValueError(f"row mismatch: features {len(E_bar)} vs masks {len(M_bar)}")
    if E_bar.shape[1] != len(w.weight):
        raise ValueError(f"mask embedding width {len(w.weight)} != feature width {E_bar.shape[1]}")
    if not (use_geometry or use_mask):
        raise ValueError("mask fusion needs at least one input term")
    macs.add(E_bar.size, "mask")
    F = E_bar.copy() if use_geometry else np.zeros_like(E_bar)
    if use_mask:
        F += w(M_bar)
    return F
