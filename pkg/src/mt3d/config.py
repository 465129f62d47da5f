"""Shared hyperparameters for the tracking pipeline."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any


@dataclass(frozen=True)
class Config:
    n_tokens: int = 128          # tokens per frame
    channels: int = 128          # feature width C
    memory_size: int = 3         # bank capacity (rho)
    k: int = 4                   # propagation neighbours per token
    layers: int = 3              # Bi-SSM depth
    state_dim: int = 16          # SSM state size per channel
    group_size: int = 16         # tokenizer neighbourhood size
    search_scale: float = 2.0
    search_margin: float = 2.0   # minimum enlargement per side, metres
    precision_cap: float = 2.0   # metres
    quality_radius: float = 0.3  # metres
    use_gfem: bool = True
    use_geometry: bool = True    # history features in the fused memory
    use_mask: bool = True        # mask embedding in the fused memory
    gfem_scale: bool = True      # 1/sqrt(C/2) logit scaling
    gfem_strict: bool = False    # attend over raw history instead of mask-fused
    scalar_softmax: bool = False
    fps_random: bool = False
    fps_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_tokens", "memory_size", "k", "layers", "state_dim", "group_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be a positive even number, got {self.channels}")
        if self.search_scale < 1.0 or self.search_margin < 0.0:
            raise ValueError("search region must not shrink the box")
        if self.precision_cap <= 0.0:
            raise ValueError("precision_cap must be positive")
        if not (self.use_geometry or self.use_mask):
            raise ValueError("at least one of use_geometry / use_mask must be enabled")

    def replace(self, **changes: Any) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str) -> "Config":
        with open(path) as f:
            return cls.from_dict(json.load(f))
