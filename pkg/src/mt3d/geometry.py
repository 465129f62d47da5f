"""Oriented boxes, point membership and rotated 3D IoU.

Boxes follow a LiDAR convention: ``l`` is the extent along the heading
(local x), ``w`` the extent across it (local y), ``h`` the vertical extent,
and ``theta`` is the yaw about +z measured from the world x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_CLIP_EPS = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(theta + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box7:
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(f"box sizes must be positive, got w={self.w} l={self.l} h={self.h}")
        for name in ("cx", "cy", "cz", "w", "l", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.w, self.l, self.h])

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box7":
        a = [float(v) for v in a]
        if len(a) != 7:
            raise ValueError(f"expected 7 box parameters, got {len(a)}")
        return cls(*a)

    def with_center(self, center) -> "Box7":
        return Box7(center[0], center[1], center[2], self.w, self.l, self.h, self.theta)


@dataclass(frozen=True)
class BoxDelta:
    """Per-frame translational and yaw offsets."""

    dx: float
    dy: float
    dz: float
    dtheta: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dz, self.dtheta)):
            raise ValueError("non-finite box delta")
        object.__setattr__(self, "dtheta", normalize_angle(float(self.dtheta)))


def box_delta(prev: Box7, new: Box7) -> BoxDelta:
    return BoxDelta(new.cx - prev.cx, new.cy - prev.cy, new.cz - prev.cz, new.theta - prev.theta)


def apply_delta(prev: Box7, d: BoxDelta) -> Box7:
    """Sizes stay fixed: targets are treated as rigid."""
    return Box7(prev.cx + d.dx, prev.cy + d.dy, prev.cz + d.dz,
                prev.w, prev.l, prev.h, prev.theta + d.dtheta)


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _xyz(c) -> np.ndarray:
    pts = np.asarray(getattr(c, "points", c), dtype=np.float64)
    return pts.reshape(-1, 3)


def box_corners(b: Box7) -> np.ndarray:
    """Return the 8 corners as an (8, 3) array.

    Order: bottom face counter-clockwise seen from above, starting at local
    (-l/2, -w/2), then the top face in the same order.
    """
    hl, hw, hh = b.l / 2, b.w / 2, b.h / 2
    local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    xy = local @ _rot2(b.theta).T + np.array([b.cx, b.cy])
    bottom = np.column_stack([xy, np.full(4, b.cz - hh)])
    top = np.column_stack([xy, np.full(4, b.cz + hh)])
    return np.vstack([bottom, top])


def _bev(b: Box7) -> np.ndarray:
    return box_corners(b)[:4, :2]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _clip(subject: list, clipper: np.ndarray) -> list:
    # Sutherland-Hodgman against a CCW convex clipper.
    out = subject
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        inp, out = out, []
        m = len(inp)
        for j in range(m):
            p, q = inp[j], inp[(j + 1) % m]
            p_in = _cross(a, b, p) >= -_CLIP_EPS
            q_in = _cross(a, b, q) >= -_CLIP_EPS
            if p_in:
                out.append(p)
            if p_in != q_in:
                # segment p->q crosses line a->b
                dp, dq = _cross(a, b, p), _cross(a, b, q)
                t = dp / (dp - dq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _area(poly: list) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def bev_intersection_area(a: Box7, b: Box7) -> float:
    subject = [tuple(p) for p in _bev(a)]
    return _area(_clip(subject, _bev(b)))


def iou3d(a: Box7, b: Box7) -> float:
    # canonical argument order makes the result bitwise symmetric
    if tuple(a.to_array()) > tuple(b.to_array()):
        a, b = b, a
    z_lo = max(a.cz - a.h / 2, b.cz - b.h / 2)
    z_hi = min(a.cz + a.h / 2, b.cz + b.h / 2)
    dz = z_hi - z_lo
    if dz <= 0:
        return 0.0
    area = bev_intersection_area(a, b)
    if area <= 0:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def center_error(a: Box7, b: Box7) -> float:
    return math.sqrt((a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 + (a.cz - b.cz) ** 2)


def to_box_frame(points, b: Box7) -> np.ndarray:
    """Express world points in the box frame (centre at origin, heading along +x)."""
    p = _xyz(points) - b.center
    c, s = math.cos(b.theta), math.sin(b.theta)
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] + s * p[:, 1]
    out[:, 1] = -s * p[:, 0] + c * p[:, 1]
    out[:, 2] = p[:, 2]
    return out


def from_box_frame(points, b: Box7) -> np.ndarray:
    p = _xyz(points)
    c, s = math.cos(b.theta), math.sin(b.theta)
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1] + b.cx
    out[:, 1] = s * p[:, 0] + c * p[:, 1] + b.cy
    out[:, 2] = p[:, 2] + b.cz
    return out


def points_in_box(points, b: Box7, margin: float = 0.0) -> np.ndarray:
    """Boundary-inclusive membership mask; the box grows by ``margin`` per side."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    local = to_box_frame(points, b)
    half = np.array([b.l / 2, b.w / 2, b.h / 2]) + margin
    return np.all(np.abs(local) <= half, axis=1)
