"""On-disk formats: frame binaries, label lines, result documents and run manifests.

Frames are ``NNNNNN.bin`` files of consecutive 16-byte records, four
little-endian float32 values ``x, y, z, intensity`` each (the KITTI velodyne
layout). Labels are ``labels.jsonl`` with one ``{frame, cx, cy, cz, w, l, h,
theta}`` object per line. ``meta.json`` holds the class label, source id and
the generating scenario when known.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box7
from .pointops import Cloud

RECORD = np.dtype("<f4")
LABEL_KEYS = ("frame", "cx", "cy", "cz", "w", "l", "h", "theta")
RESULTS_FORMAT = "mt3d-results/1"


class DataError(Exception):
    """Bad or missing input data; the message names the offending file."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    """Sorted keys and a trailing newline so identical objects give identical bytes."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


# ---------------------------------------------------------------------------
# Frames and labels

def frame_name(i: int) -> str:
    return f"{i:06d}.bin"


def encode_frame(cloud: Cloud) -> bytes:
    n = len(cloud.points)
    rec = np.empty((n, 4), dtype=RECORD)
    rec[:, :3] = cloud.points
    rec[:, 3] = 0.0 if cloud.intensity is None else cloud.intensity
    return rec.tobytes()


def decode_frame(data: bytes, where: str = "<bytes>") -> Cloud:
    if len(data) % 16:
        raise DataError(f"{where}: size {len(data)} is not a multiple of 16 bytes")
    rec = np.frombuffer(data, dtype=RECORD).reshape(-1, 4).astype(np.float64)
    if len(rec) and not np.all(np.isfinite(rec)):
        raise DataError(f"{where}: non-finite values")
    return Cloud(rec[:, :3].copy(), np.clip(rec[:, 3], 0.0, 1.0))


def write_frame(path, cloud: Cloud) -> None:
    Path(path).write_bytes(encode_frame(cloud))


def read_frame(path) -> Cloud:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    return decode_frame(data, str(path))


def label_line(i: int, b: Box7) -> str:
    row = dict(zip(LABEL_KEYS, (i, b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta)))
    return json.dumps(row, sort_keys=True)


def parse_labels(path) -> dict[int, Box7]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    boxes = {}
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            missing = [k for k in LABEL_KEYS if k not in row]
            if missing:
                raise ValueError(f"missing {', '.join(missing)}")
            boxes[int(row["frame"])] = Box7(*(float(row[k]) for k in LABEL_KEYS[1:]))
        except (ValueError, TypeError) as e:
            raise DataError(f"{path}:{n}: {e}") from None
    return boxes


def write_tracklet(out_dir, t, spec: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, cloud in enumerate(t.frames):
        p = out / frame_name(i)
        write_frame(p, cloud)
        written.append(p)
    labels = out / "labels.jsonl"
    labels.write_text("".join(label_line(i, b) + "\n" for i, b in enumerate(t.boxes)))
    meta = out / "meta.json"
    write_json(meta, {"label": t.label, "source": t.source, "frames": len(t.frames),
                      "scenario": spec})
    return written + [labels, meta]


def tracklet_files(data_dir) -> list[Path]:
    """Files a tracklet directory is read from, in a fixed order (used for input hashes)."""
    d = Path(data_dir)
    files = [d / "labels.jsonl"]
    if (d / "meta.json").exists():
        files.append(d / "meta.json")
    return files + sorted(d.glob("*.bin"))


def read_tracklet(data_dir):
    from .tracker import Tracklet

    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    boxes = parse_labels(d / "labels.jsonl")
    bins = sorted(d.glob("*.bin"))
    if not bins:
        raise DataError(f"{d}: no .bin frames")
    frame_ids = []
    for p in bins:
        try:
            frame_ids.append(int(p.stem))
        except ValueError:
            raise DataError(f"{p}: frame files must be named NNNNNN.bin") from None
    expected = list(range(len(bins)))
    if frame_ids != expected:
        gap = next(i for i in expected if i not in frame_ids)
        raise DataError(f"{d / frame_name(gap)}: missing frame")
    unlabeled = [i for i in frame_ids if i not in boxes]
    if unlabeled:
        raise DataError(f"{d / 'labels.jsonl'}: no label for frame(s) "
                        f"{', '.join(map(str, unlabeled[:10]))}")
    meta = read_json(d / "meta.json") if (d / "meta.json").exists() else {}
    frames = [read_frame(p) for p in bins]
    if len(frames) < 2:
        raise DataError(f"{d}: a tracklet needs at least 2 frames")
    return Tracklet(frames, [boxes[i] for i in frame_ids],
                    meta.get("label", "unknown"), meta.get("source", d.name))


# ---------------------------------------------------------------------------
# Run manifests and results

@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)   # path -> sha256
    outputs: list[str] = field(default_factory=list)
    package_version: str = ""
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self, with_timing: bool = True) -> dict:
        d = {"command": self.command, "argv": list(self.argv), "config": self.config,
             "seed": self.seed, "inputs": dict(sorted(self.inputs.items())),
             "outputs": list(self.outputs), "package_version": self.package_version}
        if with_timing:
            d["timing"] = dict(self.timing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        try:
            return cls(d["command"], list(d["argv"]), d["config"], d.get("seed"),
                       dict(d.get("inputs", {})), list(d.get("outputs", [])),
                       d.get("package_version", ""), dict(d.get("timing", {})))
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed run manifest: {e}") from None


_NUM = {"type": "number"}
_BOX = {"type": "object", "required": list(LABEL_KEYS[1:]),
        "properties": {k: _NUM for k in LABEL_KEYS[1:]}}
_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}

RESULTS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "label", "source", "interval", "gt_replay", "frames", "summary",
                 "manifest"],
    "properties": {
        "format": {"const": RESULTS_FORMAT},
        "label": {"type": "string"},
        "source": {"type": "string"},
        "interval": {"type": "integer", "minimum": 1},
        "gt_replay": {"type": "boolean"},
        "frames": {
            "type": "array", "minItems": 2,
            "items": {
                "type": "object",
                "required": ["frame", "source_frame", "box", "iou", "center_error", "coasting"],
                "properties": {
                    "frame": {"type": "integer", "minimum": 0},
                    "source_frame": {"type": "integer", "minimum": 0},
                    "box": _BOX,
                    "iou": _FRACTION,
                    "center_error": {"type": "number", "minimum": 0},
                    "coasting": {"type": "boolean"},
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["success", "precision", "frames", "precision_cap"],
            "properties": {"success": _FRACTION, "precision": _FRACTION,
                           "frames": {"type": "integer", "minimum": 1},
                           "precision_cap": {"type": "number", "exclusiveMinimum": 0}},
        },
        "manifest": {"type": "object", "required": ["command", "argv", "config", "inputs"]},
    },
}


def box_dict(b: Box7) -> dict:
    return dict(zip(LABEL_KEYS[1:], (b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta)))


def results_document(res, interval: int, gt_replay: bool, cap: float,
                     manifest: RunManifest) -> dict:
    frames = []
    for fr in res.frames:
        frames.append({"frame": fr.frame, "source_frame": fr.frame * interval,
                       "box": box_dict(fr.box), "iou": fr.iou,
                       "center_error": fr.center_error, "coasting": fr.coasting})
    return {
        "format": RESULTS_FORMAT, "label": res.label, "source": res.source,
        "interval": interval, "gt_replay": gt_replay, "frames": frames,
        "summary": {"success": res.success, "precision": res.precision,
                    "frames": res.n_eval_frames, "precision_cap": cap},
        "manifest": manifest.to_dict(with_timing=False),
    }


def validate_results(doc, where: str = "<results>") -> None:
    import jsonschema

    try:
        jsonschema.validate(doc, RESULTS_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(map(str, e.absolute_path)) or "(root)"
        raise DataError(f"{where}: {path}: {e.message}") from None
    for fr in doc["frames"]:
        if not all(math.isfinite(v) for v in fr["box"].values()):
            raise DataError(f"{where}: non-finite box at frame {fr['frame']}")
