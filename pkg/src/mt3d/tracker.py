"""Online single-object tracker: search-region cropping, memory updates and one-pass runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .evalbench import precision_auc, success_auc
from .geometry import Box7, center_error, from_box_frame, iou3d, points_in_box, to_box_frame
from .localize import (LocalizeOutput, grads_to_raw, head_forward, localize, loss_grads,
                       loss_terms, make_targets, mask_probability, split_raw)
from .memory import MemoryBank, MemoryFrame
from .mip import encode_first_frame, mip_forward
from .pointops import Cloud
from .weights import ModelWeights


class EmptySearchRegion(ValueError):
    pass


@dataclass
class Tracklet:
    frames: list[Cloud]
    boxes: Sequence[Box7]
    label: str = "unknown"
    source: str = ""
    point_labels: list[np.ndarray] | None = None  # generator labels, 0 bg / 1 target / 2 distractor

    def __post_init__(self) -> None:
        if len(self.frames) < 2:
            raise ValueError(f"a tracklet needs at least 2 frames, got {len(self.frames)}")
        if len(self.frames) != len(self.boxes):
            raise ValueError(f"{len(self.frames)} frames but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TrackerState:
    bank: MemoryBank
    current_box: Box7
    cfg: Config
    weights: ModelWeights
    frame_index: int
    coasting: bool = False
    last_output: LocalizeOutput | None = None


def canonical_prior(box: Box7) -> Box7:
    return Box7(0.0, 0.0, 0.0, box.w, box.l, box.h, 0.0)


def search_region(cloud: Cloud, box: Box7, cfg: Config) -> Cloud:
    """Points around ``box`` expressed in its frame.

    Each half extent grows to ``max(scale * half, half + margin)``.
    """
    local = to_box_frame(cloud.points, box)
    half = np.array([box.l / 2, box.w / 2, box.h / 2])
    ext = np.maximum(half * cfg.search_scale, half + cfg.search_margin)
    inside = np.all(np.abs(local) <= ext, axis=1)
    inten = None if cloud.intensity is None else cloud.intensity[inside]
    return Cloud(local[inside], inten)


def init(first: Cloud, b1: Box7, cfg: Config, weights: ModelWeights, t: int = 0) -> TrackerState:
    region = search_region(first, b1, cfg)
    if len(region) == 0:
        raise EmptySearchRegion("empty search region")
    Q, E = encode_first_frame(region, cfg, weights.mip)
    M = points_in_box(Q, canonical_prior(b1)).astype(np.float64)
    bank = MemoryBank(cfg.memory_size)
    bank.push(MemoryFrame(from_box_frame(Q, b1), E, M), t)
    return TrackerState(bank, b1, cfg, weights, frame_index=t + 1)


def step(state: TrackerState, cloud: Cloud) -> tuple[Box7, TrackerState]:
    """Advance one frame. An empty search region repeats the previous box and leaves the bank alone."""
    prev, cfg, t = state.current_box, state.cfg, state.frame_index
    region = search_region(cloud, prev, cfg)
    state.frame_index = t + 1
    if len(region) == 0:
        state.coasting = True
        state.last_output = None
        return prev, state
    local_bank = state.bank.mapped(lambda Q: to_box_frame(Q, prev))
    Q, E = mip_forward(region, local_bank, cfg, state.weights.mip)
    out, local_box = localize(Q, E, state.weights.head, canonical_prior(prev))
    center = from_box_frame(local_box.center[None], prev)[0]
    box = Box7(center[0], center[1], center[2], prev.w, prev.l, prev.h,
               prev.theta + local_box.theta)
    state.bank.push(MemoryFrame(from_box_frame(Q, prev), E, mask_probability(out)), t)
    state.current_box = box
    state.coasting = False
    state.last_output = out
    return box, state


def subsample_htv(t: Tracklet, interval: int) -> Tracklet:
    """Keep frames 0, interval, 2*interval, ... to emulate large temporal gaps."""
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    keep = list(range(0, len(t), interval))
    if len(keep) < 2:
        raise ValueError(f"interval {interval} leaves {len(keep)} frame(s) of {len(t)}")
    labels = None if t.point_labels is None else [t.point_labels[i] for i in keep]
    return Tracklet([t.frames[i] for i in keep], [t.boxes[i] for i in keep],
                    t.label, t.source, labels)


@dataclass
class FrameResult:
    frame: int
    box: Box7
    coasting: bool = False
    iou: float | None = None
    center_error: float | None = None


@dataclass
class TrackletResult:
    frames: list[FrameResult]
    label: str = "unknown"
    source: str = ""
    success: float = 0.0
    precision: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def n_eval_frames(self) -> int:
        return len(self.frames) - 1


def track_sequence(frames: Sequence[Cloud], first_box: Box7, cfg: Config, weights: ModelWeights,
                   override: Callable[[int], Box7] | None = None) -> list[FrameResult]:
    """One-pass tracking: only ``first_box`` is known; no re-initialisation.

    ``override`` replaces the prediction at each frame (used for the oracle mode).
    """
    state = init(frames[0], first_box, cfg, weights)
    results = [FrameResult(0, first_box)]
    for i in range(1, len(frames)):
        box, state = step(state, frames[i])
        if override is not None:
            box = override(i)
            state.current_box = box
        results.append(FrameResult(i, box, state.coasting))
    return results


def run_tracklet(t: Tracklet, cfg: Config, weights: ModelWeights,
                 gt_replay: bool = False) -> TrackletResult:
    """Track, then score every frame; frame 0 is the initialisation and is left out of the AUCs."""
    override = (lambda i: t.boxes[i]) if gt_replay else None
    frames = track_sequence(t.frames, t.boxes[0], cfg, weights, override)
    for fr in frames:
        gt = t.boxes[fr.frame]
        fr.iou = iou3d(fr.box, gt)
        fr.center_error = center_error(fr.box, gt)
    ious = [fr.iou for fr in frames[1:]]
    errs = [fr.center_error for fr in frames[1:]]
    return TrackletResult(frames, t.label, t.source,
                          success_auc(ious).auc, precision_auc(errs, cfg.precision_cap).auc)


# ---------------------------------------------------------------------------
# Smoke-level head fitting

@dataclass
class Sample:
    Q: np.ndarray
    E: np.ndarray
    mask: np.ndarray
    center: np.ndarray
    box: Box7          # ground truth in the search-region frame
    prior: Box7


def segment_samples(t: Tracklet, cfg: Config, weights: ModelWeights, start: int = 0,
                    length: int = 8) -> list[Sample]:
    """Backbone features for one segment with teacher forcing.

    Search regions follow the previous ground-truth box and the bank stores
    ground-truth masks, so the features do not depend on the head weights.
    """
    boxes = t.boxes[start:start + length]
    frames = t.frames[start:start + length]
    prev = boxes[0]
    region = search_region(frames[0], prev, cfg)
    Q, E = encode_first_frame(region, cfg, weights.mip)
    bank = MemoryBank(cfg.memory_size)
    bank.push(MemoryFrame(from_box_frame(Q, prev), E,
                          points_in_box(Q, canonical_prior(prev)).astype(float)), 0)
    samples = []
    for i in range(1, len(frames)):
        gt = boxes[i]
        region = search_region(frames[i], prev, cfg)
        if len(region) == 0:
            prev = gt
            continue
        local_bank = bank.mapped(lambda q: to_box_frame(q, prev))
        Q, E = mip_forward(region, local_bank, cfg, weights.mip)
        c = to_box_frame(gt.center[None], prev)[0]
        gt_local = Box7(c[0], c[1], c[2], gt.w, gt.l, gt.h, gt.theta - prev.theta)
        mask = points_in_box(Q, gt_local).astype(float)
        samples.append(Sample(Q, E, mask, c, gt_local, canonical_prior(prev)))
        bank.push(MemoryFrame(from_box_frame(Q, prev), E, mask), i)
        prev = gt
    return samples


def _sample_loss(s: Sample, raw: np.ndarray, cfg: Config):
    out = split_raw(raw, s.Q, s.prior.theta)
    tg = make_targets(out, s.mask, s.center, s.box, cfg)
    return out, tg, loss_terms(out, tg)


def fit_head(samples: list[Sample], weights: ModelWeights, cfg: Config, steps: int = 200,
             lr: float = 0.05, momentum: float = 0.9) -> list[float]:
    """Heavy-ball gradient descent on the head weights; returns the mean total loss per step."""
    head = weights.head
    vel_w = np.zeros_like(head.w)
    vel_b = np.zeros_like(head.b)
    history = []
    for _ in range(steps + 1):
        gw = np.zeros_like(head.w)
        gb = np.zeros_like(head.b)
        total = 0.0
        for s in samples:
            raw = head_forward(s.E, head)
            out, tg, lb = _sample_loss(s, raw, cfg)
            total += lb.total
            per_term = loss_grads(out, tg)
            fields = {f: sum(per_term[t][f] for t in per_term) for f in per_term["L_m"]}
            d_raw = grads_to_raw(fields)
            gw += s.E.T @ d_raw
            gb += d_raw.sum(axis=0)
        history.append(total / len(samples))
        if len(history) > steps:
            break
        vel_w = momentum * vel_w - lr * gw / len(samples)
        vel_b = momentum * vel_b - lr * gb / len(samples)
        head.w += vel_w
        head.b += vel_b
    return history
