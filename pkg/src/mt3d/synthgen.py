"""Deterministic synthetic LiDAR tracklets.

The sensor sits at the origin. Each frame samples points on the camera-facing
faces of the target box (back faces culled) with a count that falls off as
``(REF_RANGE / range)**2``, adds Gaussian noise, a ground-plane clutter patch
around the target and same-size distractor boxes. Every point carries a label:
0 background, 1 target, 2 distractor.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box7, from_box_frame
from .pointops import Cloud
from .tracker import Tracklet

REF_RANGE = 10.0        # metres at which a frame gets the full point budget
MIN_TARGET_POINTS = 3
GROUND_GAP = 0.05       # ground sits this far below the target's bottom face
CLUTTER_EXTENT = 8.0    # half side of the clutter patch around the target, metres

BACKGROUND, TARGET, DISTRACTOR = 0, 1, 2


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "custom"
    label: str = "Car"
    size: tuple[float, float, float] = (1.8, 4.2, 1.6)       # w, l, h
    start: tuple[float, float, float, float] = (10.0, 2.0, -0.9, 0.0)  # cx, cy, cz, theta
    motion: tuple[tuple[int, float, float], ...] = ((40, 0.5, 0.0),)  # (frames, speed/frame, yaw/frame)
    frames: int = 40
    point_budget: int = 300
    clutter_density: float = 0.5                               # ground points per square metre
    distractors: tuple[tuple[float, float], ...] = ()         # (forward, left) offsets in the target frame
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frames < 2:
            raise ValueError(f"a scenario needs at least 2 frames, got {self.frames}")
        if self.noise < 0:
            raise ValueError("noise sigma must be >= 0")
        if min(self.size) <= 0:
            raise ValueError(f"sizes must be positive, got {self.size}")
        if self.point_budget < 1 or self.clutter_density < 0:
            raise ValueError("point budget must be >= 1 and clutter density >= 0")
        if not self.motion:
            raise ValueError("motion profile is empty")

    def to_dict(self) -> dict:
        return {"name": self.name, "label": self.label, "size": list(self.size),
                "start": list(self.start), "motion": [list(m) for m in self.motion],
                "frames": self.frames, "point_budget": self.point_budget,
                "clutter_density": self.clutter_density,
                "distractors": [list(d) for d in self.distractors],
                "noise": self.noise, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        for key in ("size", "start"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if "motion" in d:
            d["motion"] = tuple((int(n), float(v), float(y)) for n, v, y in d["motion"])
        if "distractors" in d:
            d["distractors"] = tuple((float(a), float(b)) for a, b in d["distractors"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def trajectory(spec: ScenarioSpec) -> list[Box7]:
    """Ground-truth boxes: piecewise-constant speed along the heading and yaw rate."""
    w, l, h = spec.size
    x, y, z, th = spec.start
    rates = [(v, yr) for n, v, yr in spec.motion for _ in range(n)]
    boxes = []
    for i in range(spec.frames):
        boxes.append(Box7(x, y, z, w, l, h, th))
        v, yr = rates[min(i, len(rates) - 1)]
        x += v * np.cos(th)
        y += v * np.sin(th)
        th += yr
    return boxes


# local face normals and the two in-face axes (unit directions in the box frame)
_FACES = (
    (np.array([1.0, 0, 0]), 1, 2), (np.array([-1.0, 0, 0]), 1, 2),
    (np.array([0, 1.0, 0]), 0, 2), (np.array([0, -1.0, 0]), 0, 2),
    (np.array([0, 0, 1.0]), 0, 1),
)


def surface_points(box: Box7, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points spread over the faces visible from the origin, area weighted."""
    half = np.array([box.l, box.w, box.h]) / 2
    c, s = np.cos(box.theta), np.sin(box.theta)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    faces, areas = [], []
    for normal, a, b in _FACES:
        axis = int(np.argmax(np.abs(normal)))
        centre_world = box.center + rot @ (normal * half[axis])
        if np.dot(rot @ normal, centre_world) < 0:  # facing the sensor
            faces.append((normal, axis, a, b))
            areas.append(4 * half[a] * half[b])
    if not faces:
        return np.zeros((0, 3))
    areas = np.array(areas)
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    local = np.empty((n, 3))
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    for fi, (normal, axis, a, b) in enumerate(faces):
        sel = which == fi
        local[sel, axis] = normal[axis] * half[axis]
        local[sel, a] = uv[sel, 0] * half[a]
        local[sel, b] = uv[sel, 1] * half[b]
    return from_box_frame(local, box)


def _point_count(box: Box7, budget: int) -> int:
    r = max(float(np.linalg.norm(box.center)), 1.0)
    return max(MIN_TARGET_POINTS, int(round(budget * min((REF_RANGE / r) ** 2, 4.0))))


def _frame(spec: ScenarioSpec, box: Box7, rng: np.random.Generator):
    parts, labels = [], []
    tgt = surface_points(box, _point_count(box, spec.point_budget), rng)
    parts.append(tgt)
    labels.append(np.full(len(tgt), TARGET))
    c, s = np.cos(box.theta), np.sin(box.theta)
    for fwd, left in spec.distractors:
        d = Box7(box.cx + c * fwd - s * left, box.cy + s * fwd + c * left, box.cz,
                 box.w, box.l, box.h, box.theta)
        pts = surface_points(d, _point_count(d, spec.point_budget), rng)
        parts.append(pts)
        labels.append(np.full(len(pts), DISTRACTOR))
    n_ground = int(round(spec.clutter_density * (2 * CLUTTER_EXTENT) ** 2))
    if n_ground:
        ground = np.empty((n_ground, 3))
        ground[:, :2] = box.center[:2] + rng.uniform(-CLUTTER_EXTENT, CLUTTER_EXTENT, (n_ground, 2))
        ground[:, 2] = box.cz - box.h / 2 - GROUND_GAP
        parts.append(ground)
        labels.append(np.full(n_ground, BACKGROUND))
    pts = np.concatenate(parts)
    if spec.noise > 0:
        pts = pts + rng.normal(0.0, spec.noise, pts.shape)
    intensity = rng.uniform(0.0, 1.0, len(pts))
    return Cloud(pts, intensity), np.concatenate(labels).astype(np.int8)


def generate(spec: ScenarioSpec) -> Tracklet:
    """Pure function of ``spec``: the same spec always yields bit-identical frames."""
    boxes = trajectory(spec)
    frames, labels = [], []
    for i, box in enumerate(boxes):
        cloud, lab = _frame(spec, box, np.random.default_rng([spec.seed, i]))
        frames.append(cloud)
        labels.append(lab)
    return Tracklet(frames, boxes, spec.label, spec.name, labels)


def preset_suite() -> dict[str, ScenarioSpec]:
    return {
        "car-straight": ScenarioSpec("car-straight", "Car", seed=11),
        "car-turn": ScenarioSpec("car-turn", "Car", start=(12.0, -3.0, -0.9, 0.3),
                                 motion=((10, 0.5, 0.0), (20, 0.4, 0.06), (10, 0.5, 0.0)),
                                 seed=12),
        "ped-sparse": ScenarioSpec("ped-sparse", "Pedestrian", size=(0.6, 0.8, 1.7),
                                   start=(15.0, 4.0, -0.85, 1.2),
                                   motion=((40, 0.12, 0.0),), point_budget=60,
                                   clutter_density=0.3, noise=0.03, seed=13),
        "distractor-pair": ScenarioSpec("distractor-pair", "Car", start=(9.0, 0.0, -0.9, 0.0),
                                        motion=((40, 0.4, 0.0),), distractors=((0.5, 3.5),),
                                        seed=14),
    }


def preset(name: str) -> ScenarioSpec:
    suite = preset_suite()
    if name not in suite:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(suite)}")
    return suite[name]


def tracklet_digest(t: Tracklet) -> str:
    """SHA-256 over float32 frames, boxes and point labels."""
    h = hashlib.sha256()
    for i, cloud in enumerate(t.frames):
        h.update(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
        if cloud.intensity is not None:
            h.update(np.ascontiguousarray(cloud.intensity, dtype="<f4").tobytes())
        h.update(np.asarray(t.boxes[i].to_array(), dtype="<f8").tobytes())
        if t.point_labels is not None:
            h.update(np.asarray(t.point_labels[i], dtype=np.int8).tobytes())
    return h.hexdigest()
