"""Model weight containers and the checksummed ``.mt3d`` weights file.

File layout (all integers little-endian)::

    b"MT3D" | u32 version | u32 header length | header JSON | float32 payload | sha256

The header is compact sorted-key JSON holding the config echo and a tensor
manifest (name, shape, element offset). The trailing digest covers every
preceding byte, so any corruption is detected before parsing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .gfem import GFEMWeights, GroupWeights
from .localize import HEAD_OUT, HeadWeights, init_head
from .memory import MaskEmbedWeights
from .mip import MIPWeights, init_mip
from .pointops import TokenizerWeights
from .ssm import BiSSMLayer, BiSSMStack, SelectiveParams

MAGIC = b"MT3D"
VERSION = 1
_SSM_FIELDS = ("A", "w_b", "w_c", "w_dt", "b_dt", "w_gate")


class WeightsError(ValueError):
    pass


class FormatError(WeightsError):
    pass


class ChecksumError(WeightsError):
    pass


class MissingTensorError(WeightsError):
    pass


class ShapeMismatchError(WeightsError):
    pass


@dataclass
class ModelWeights:
    mip: MIPWeights
    head: HeadWeights


def required_tensors(cfg: Config) -> dict[str, tuple[int, ...]]:
    """Every tensor name the forward pass and head read, with its shape."""
    C, half, d = cfg.channels, cfg.channels // 2, cfg.state_dim
    req = {
        "tokenizer.w1": (3, half), "tokenizer.b1": (half,),
        "tokenizer.w2": (half, C), "tokenizer.b2": (C,),
        "mask.weight": (C,), "mask.bias": (C,),
    }
    for g in range(2):
        for name in ("wq", "wk", "wv"):
            req[f"gfem.{g}.{name}"] = (half, half)
    ssm_shapes = {"A": (C, d), "w_b": (C, d), "w_c": (C, d), "w_dt": (C, C),
                  "b_dt": (C,), "w_gate": (C, C)}
    for i in range(cfg.layers):
        for direction in ("fwd", "bwd"):
            for name in _SSM_FIELDS:
                req[f"ssm.{i}.{direction}.{name}"] = ssm_shapes[name]
        req[f"ssm.{i}.norm"] = (C,)
    req.update({"prop.w": (2 * C, C), "prop.b": (C,), "prop.alpha": (C,), "prop.beta": (C,),
                "head.w": (C, HEAD_OUT), "head.b": (HEAD_OUT,)})
    return req


def to_tensors(w: ModelWeights) -> dict[str, np.ndarray]:
    m = w.mip
    out = {f"tokenizer.{n}": getattr(m.tokenizer, n) for n in ("w1", "b1", "w2", "b2")}
    out["mask.weight"] = m.mask.weight
    out["mask.bias"] = m.mask.bias
    for g, grp in enumerate(m.gfem.groups):
        for n in ("wq", "wk", "wv"):
            out[f"gfem.{g}.{n}"] = getattr(grp, n)
    for i, layer in enumerate(m.ssm.layers):
        for direction in ("fwd", "bwd"):
            p = getattr(layer, direction)
            for n in _SSM_FIELDS:
                out[f"ssm.{i}.{direction}.{n}"] = getattr(p, n)
        out[f"ssm.{i}.norm"] = layer.norm
    out.update({"prop.w": m.proj_w, "prop.b": m.proj_b, "prop.alpha": m.alpha,
                "prop.beta": m.beta, "head.w": w.head.w, "head.b": w.head.b})
    return out


def from_tensors(t: dict[str, np.ndarray], cfg: Config) -> ModelWeights:
    req = required_tensors(cfg)
    missing = sorted(set(req) - set(t))
    if missing:
        raise MissingTensorError(f"missing tensor(s): {', '.join(missing)}")
    for name, shape in req.items():
        if tuple(np.shape(t[name])) != shape:
            raise ShapeMismatchError(
                f"tensor {name} has shape {tuple(np.shape(t[name]))}, expected {shape}")
    g = lambda name: np.array(t[name], dtype=np.float64)
    layers = []
    for i in range(cfg.layers):
        dirs = [SelectiveParams(*(g(f"ssm.{i}.{d}.{n}") for n in _SSM_FIELDS))
                for d in ("fwd", "bwd")]
        layers.append(BiSSMLayer(dirs[0], dirs[1], g(f"ssm.{i}.norm")))
    mip = MIPWeights(
        tokenizer=TokenizerWeights(*(g(f"tokenizer.{n}") for n in ("w1", "b1", "w2", "b2"))),
        mask=MaskEmbedWeights(g("mask.weight"), g("mask.bias")),
        gfem=GFEMWeights(tuple(GroupWeights(*(g(f"gfem.{k}.{n}") for n in ("wq", "wk", "wv")))
                               for k in range(2))),
        ssm=BiSSMStack(layers),
        proj_w=g("prop.w"), proj_b=g("prop.b"), alpha=g("prop.alpha"), beta=g("prop.beta"),
    )
    return ModelWeights(mip, HeadWeights(g("head.w"), g("head.b")))


def init_weights(cfg: Config, seed: int = 0) -> ModelWeights:
    """Seeded initialisation, rounded to float32 so a saved file reloads exactly.

    Roles: affine maps are zero-mean normal with std 1/sqrt(fan_in) (0.1 of that
    for the step projection, 0.01 for the head); biases zero; SSM state decay
    A = -(1..d); step bias is softplus^-1 of a log-uniform draw in [1e-3, 0.1];
    norm scales and the propagation alpha are one, beta zero.
    """
    rng = np.random.default_rng(seed)
    w = ModelWeights(init_mip(cfg, rng), init_head(cfg.channels, rng))
    rounded = {k: v.astype(np.float32).astype(np.float64) for k, v in to_tensors(w).items()}
    return from_tensors(rounded, cfg)


# ---------------------------------------------------------------------------
# File format

def dumps(w: ModelWeights, cfg: Config, meta: dict | None = None, bank=None) -> bytes:
    """Serialise weights; a memory bank, if given, is stored alongside as ``bank.*`` tensors."""
    tensors = to_tensors(w)
    if bank is not None:
        tensors |= bank.state_dict()
    manifest, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"config": cfg.to_dict(), "tensors": manifest, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _parse(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 12 + 32 or data[:4] != MAGIC:
        raise FormatError("not an MT3D weights file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("weights checksum mismatch")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}")
    try:
        header = json.loads(body[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad weights header: {e}") from None
    payload = np.frombuffer(body[12 + hlen:], dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > len(payload):
            raise FormatError(f"tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = payload[start:start + size].reshape(entry["shape"])
    return header, tensors


def loads(data: bytes) -> tuple[ModelWeights, Config, dict]:
    """Parse weights bytes; returns (weights, config echo, meta)."""
    header, tensors = _parse(data)
    cfg = Config.from_dict(header["config"])
    return from_tensors(tensors, cfg), cfg, header.get("meta", {})


def loads_bank(data: bytes):
    """The memory bank snapshot stored with the weights, or None."""
    from .memory import MemoryBank

    header, tensors = _parse(data)
    if "bank.timestamps" not in tensors:
        return None
    cfg = Config.from_dict(header["config"])
    return MemoryBank.from_state(cfg.memory_size, tensors)


def save(path, w: ModelWeights, cfg: Config, meta: dict | None = None, bank=None) -> bytes:
    data = dumps(w, cfg, meta, bank)
    Path(path).write_bytes(data)
    return data


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise WeightsError(f"cannot read weights file {path}: {e.strerror}") from None


def load(path) -> tuple[ModelWeights, Config, dict]:
    return loads(_read(path))


def load_bank(path):
    return loads_bank(_read(path))
