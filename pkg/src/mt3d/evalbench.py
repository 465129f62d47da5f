"""One-pass evaluation metrics, score aggregation and the complexity benchmark.

Both AUC curves use a 101-point grid ``tau_i = cap * i / 100`` with strict
inequalities (IoU > tau for success, error < tau for precision). The AUC is
the mean of the 101 fractions, computed from integer counts so that it is
exactly reproducible.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config

GRID_STEPS = 101


@dataclass
class MetricCurve:
    thresholds: np.ndarray
    fractions: np.ndarray
    auc: float


def _grid(cap: float) -> np.ndarray:
    return cap * (np.arange(GRID_STEPS) / (GRID_STEPS - 1))


def _curve(hits: np.ndarray, thresholds: np.ndarray, n: int) -> MetricCurve:
    counts = hits.sum(axis=1)
    return MetricCurve(thresholds, counts / n, int(counts.sum()) / (GRID_STEPS * n))


def success_auc(ious) -> MetricCurve:
    x = np.asarray(ious, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("success_auc needs at least one IoU value")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("IoU values must lie in [0, 1]")
    thr = _grid(1.0)
    return _curve(x[None, :] > thr[:, None], thr, len(x))


def precision_auc(errors, cap: float = 2.0) -> MetricCurve:
    x = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("precision_auc needs at least one error value")
    if np.any(x < 0):
        raise ValueError("centre errors must be non-negative")
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    thr = _grid(cap)
    return _curve(x[None, :] < thr[:, None], thr, len(x))


@dataclass
class Score:
    label: str
    success: float
    precision: float
    frames: int


@dataclass
class AggregateTable:
    rows: list[Score]   # one per class, sorted by label
    mean: Score

    def to_dict(self) -> dict:
        row = lambda s: {"class": s.label, "success": s.success,
                         "precision": s.precision, "frames": s.frames}
        return {"classes": [row(s) for s in self.rows], "mean": row(self.mean)}

    def to_text(self, scale: float = 100.0) -> str:
        lines = [f"{'class':<16}{'frames':>8}{'success':>10}{'precision':>11}"]
        for s in self.rows + [self.mean]:
            lines.append(f"{s.label:<16}{s.frames:>8d}{s.success * scale:>10.1f}"
                         f"{s.precision * scale:>11.1f}")
        return "\n".join(lines)


def _weighted(label: str, scores: list[Score]) -> Score:
    n = sum(s.frames for s in scores)
    if n <= 0:
        raise ValueError(f"no frames for {label!r}")
    return Score(label,
                 sum(s.success * s.frames for s in scores) / n,
                 sum(s.precision * s.frames for s in scores) / n,
                 n)


def aggregate(scores: list[Score]) -> AggregateTable:
    """Frame-count weighted means per class and over everything."""
    if not scores:
        raise ValueError("nothing to aggregate")
    by_class: dict[str, list[Score]] = {}
    for s in scores:
        by_class.setdefault(s.label, []).append(s)
    rows = [_weighted(label, by_class[label]) for label in sorted(by_class)]
    return AggregateTable(rows, _weighted("Mean", rows))


# ---------------------------------------------------------------------------
# Complexity

def attention_terms(cfg: Config, n_points: int) -> tuple[int, int]:
    """(linear, quadratic) MACs of one cross-attention pass of n queries over rho*n keys."""
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    C, rho = cfg.channels, cfg.memory_size
    keys = rho * n_points
    linear = n_points * C * C + 2 * keys * C * C + n_points * C * C
    quadratic = 2 * n_points * keys * C
    return linear, quadratic


def flops_attention_baseline(cfg: Config, n_points: int) -> int:
    lin, quad = attention_terms(cfg, n_points)
    return lin + quad


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


@dataclass
class BenchRow:
    n: int
    flops_ours: int
    flops_attn: int
    steps_per_sec: float
    seconds: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    slope_ours: float
    slope_attn: float
    slope_time: float
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def summary(self) -> str:
        return (f"flops slope (ours) = {self.slope_ours:.3f}\n"
                f"flops slope (attention baseline) = {self.slope_attn:.3f}\n"
                f"wall-clock slope (ours) = {self.slope_time:.3f}")


def bench_inputs(cfg: Config, n_points: int, seed: int = 0):
    """Random cloud of ``n_points`` plus a full memory bank, in a shared local frame."""
    from .memory import MemoryBank, MemoryFrame
    from .pointops import Cloud

    rng = np.random.default_rng(seed)
    cloud = Cloud(rng.uniform(-4.0, 4.0, (n_points, 3)))
    bank = MemoryBank(cfg.memory_size)
    for t in range(cfg.memory_size):
        E = rng.normal(size=(cfg.n_tokens, cfg.channels))
        bank.push(MemoryFrame(rng.uniform(-4.0, 4.0, (cfg.n_tokens, 3)), E,
                              rng.uniform(size=(cfg.n_tokens, 1))), t)
    return cloud, bank


def run_bench(cfg: Config, sizes, repetitions: int = 3, seed: int = 0,
              threads: int = 1) -> BenchReport:
    """Median wall-clock time of the full propagation forward (GFEM on) per input size."""
    from threadpoolctl import threadpool_limits

    from .mip import flops_mip, mip_forward
    from .weights import init_weights

    sizes = [int(n) for n in sizes]
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError("sizes must be strictly ascending")
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    cfg = cfg.replace(use_gfem=True)
    weights = init_weights(cfg, seed)
    rows = []
    with threadpool_limits(limits=threads):
        for n in sizes:
            cloud, bank = bench_inputs(cfg, n, seed)
            mip_forward(cloud, bank, cfg, weights.mip)  # warm-up
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                mip_forward(cloud, bank, cfg, weights.mip)
                times.append(time.perf_counter() - t0)
            med = statistics.median(times)
            rows.append(BenchRow(n, flops_mip(cfg, n), flops_attention_baseline(cfg, n),
                                 1.0 / med, med))
    xs = [r.n for r in rows]
    if len(rows) >= 2:
        slopes = (loglog_slope(xs, [r.flops_ours for r in rows]),
                  loglog_slope(xs, [r.flops_attn for r in rows]),
                  loglog_slope(xs, [r.seconds for r in rows]))
    else:
        slopes = (float("nan"),) * 3
    return BenchReport(rows, *slopes, threads=threads)
