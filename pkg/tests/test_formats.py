import json

import numpy as np
import pytest

from mt3d.formats import (DataError, RunManifest, decode_frame, encode_frame, parse_labels,
                          read_frame, read_tracklet, validate_results, write_frame,
                          write_tracklet)
from mt3d.geometry import Box7
from mt3d.pointops import Cloud
from mt3d.synthgen import ScenarioSpec, generate


def test_frame_roundtrip_bit_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    inten = rng.uniform(size=50).astype(np.float32).astype(np.float64)
    write_frame(tmp_path / "000000.bin", Cloud(pts, inten))
    back = read_frame(tmp_path / "000000.bin")
    assert np.array_equal(back.points, pts) and np.array_equal(back.intensity, inten)
    assert encode_frame(back) == (tmp_path / "000000.bin").read_bytes()
    assert len(encode_frame(back)) == 50 * 16


def test_truncated_frame():
    with pytest.raises(DataError, match="x.bin"):
        decode_frame(b"\0" * 20, "x.bin")


def test_tracklet_dir_roundtrip(tmp_path):
    t = generate(ScenarioSpec(frames=4, seed=3))
    write_tracklet(tmp_path, t, {"seed": 3})
    back = read_tracklet(tmp_path)
    assert back.boxes == list(t.boxes)
    assert back.label == t.label
    lines = (tmp_path / "labels.jsonl").read_text().splitlines()
    assert set(json.loads(lines[0])) == {"frame", "cx", "cy", "cz", "w", "l", "h", "theta"}


def test_missing_files_named(tmp_path):
    t = generate(ScenarioSpec(frames=4, seed=3))
    write_tracklet(tmp_path, t)
    (tmp_path / "000002.bin").unlink()
    with pytest.raises(DataError, match="000002.bin"):
        read_tracklet(tmp_path)
    write_tracklet(tmp_path, t)
    lines = (tmp_path / "labels.jsonl").read_text().splitlines()
    (tmp_path / "labels.jsonl").write_text("\n".join(lines[:3]) + "\n")
    with pytest.raises(DataError, match="labels.jsonl"):
        read_tracklet(tmp_path)
    with pytest.raises(DataError):
        parse_labels(tmp_path / "nope.jsonl")


def test_schema_rejects_bad_documents():
    with pytest.raises(DataError, match="r.json"):
        validate_results({"format": "other"}, "r.json")


def test_manifest_roundtrip():
    m = RunManifest("track", ["track", "--data", "d"], {"k": 4}, 1, {"a": "00"}, ["o"], "0.1.0",
                    {"total": 1.5})
    assert RunManifest.from_dict(m.to_dict()) == m
    assert "timing" not in m.to_dict(with_timing=False)
    with pytest.raises(DataError):
        RunManifest.from_dict({"argv": []})
