"""Embedded oracle suite behind ``mt3d selfcheck``.

Every check compares a production routine with an independent reference
(matrix exponential, brute-force loops, Monte Carlo counting, finite
differences). ``fault`` makes a check corrupt the value under test, which must
turn it red; that is how the harness itself is tested.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import expm

from .config import Config
from .evalbench import Score, aggregate, precision_auc, success_auc
from .geometry import Box7, iou3d, to_box_frame
from .gfem import grouped_cross_attention, init_gfem
from .localize import (LocalizeOutput, bce_with_logits, losses_grad_check, make_targets,
                       smooth_l1)
from .mip import init_mip, propagate
from .ssm import (LTISystem, SelectiveParams, causal_conv, init_selective, lti_kernel,
                  lti_scan, selective_scan, selective_scan_backward, zoh_discretize)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# ---------------------------------------------------------------------------

def check_zoh(fault: bool = False, n: int = 200, n_small: int = 20, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        d = int(rng.integers(1, 9))
        A = rng.uniform(-5, 5, d)
        if i < n_small:
            A[rng.integers(d)] = rng.choice([-1, 1]) * 10.0 ** rng.uniform(-12, -5)
        B = rng.uniform(-5, 5, d)
        dt = float(rng.uniform(1e-3, 1.0))
        got = zoh_discretize(LTISystem(A, B, np.ones(d), dt))
        M = np.zeros((d + 1, d + 1))
        M[:d, :d] = np.diag(A) * dt
        M[:d, d] = B * dt
        E = expm(M)
        Bbar = got.Bbar * (1 + 1e-3) if fault else got.Bbar
        worst = max(worst, _rel(got.Abar, np.diag(E[:d, :d])), _rel(Bbar, E[:d, d]))
    return worst <= 1e-6, f"max relative error {worst:.2e} over {n} systems (tol 1e-6)"


def check_lti(fault: bool = False, n: int = 100, length: int = 256, seed: int = 2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 9))
        sys = LTISystem(-rng.uniform(0.05, 5, d), rng.normal(size=d), rng.normal(size=d),
                        float(rng.uniform(0.01, 1.0)))
        dsys = zoh_discretize(sys)
        x = rng.normal(size=length)
        y = lti_scan(dsys, sys.C, x)
        if fault:
            y = y + 1e-3 * np.max(np.abs(y))
        worst = max(worst, _rel(y, causal_conv(x, lti_kernel(dsys, sys.C, length))))
    return worst <= 1e-5, f"max relative error {worst:.2e} over {n} systems (tol 1e-5)"


def _random_selective(rng, C, d, scale=1.0) -> SelectiveParams:
    p = init_selective(C, d, rng)
    p.A = -rng.uniform(0.5, 3.0, (C, d))
    p.w_dt = rng.normal(0, scale / np.sqrt(C), (C, C))
    p.b_dt = rng.normal(0, 0.5, C)
    return p


def _fd_selective(p: SelectiveParams, X, dY, h: float = 1e-6):
    f = lambda: float(np.sum(dY * selective_scan(p, X)))
    out = {}
    for name in ("A", "w_b", "w_c", "w_dt", "b_dt"):
        arr = getattr(p, name)
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            v = arr[i]
            arr[i] = v + h
            hi = f()
            arr[i] = v - h
            lo = f()
            arr[i] = v
            g[i] = (hi - lo) / (2 * h)
        out[name] = g
    gX = np.zeros_like(X)
    for i in np.ndindex(X.shape):
        v = X[i]
        X[i] = v + h
        hi = f()
        X[i] = v - h
        lo = f()
        X[i] = v
        gX[i] = (hi - lo) / (2 * h)
    out["X"] = gX
    return out


def check_scan(fault: bool = False, n_eq: int = 50, n_fd: int = 20, seed: int = 3):
    rng = np.random.default_rng(seed)
    worst_eq = 0.0
    for _ in range(n_eq):
        p = _random_selective(rng, 32, 16)
        X = rng.normal(size=(128, 32))
        seq = selective_scan(p, X)
        chk = selective_scan(p, X, chunk=16)
        if fault:
            chk = chk + 1e-4
        worst_eq = max(worst_eq, float(np.max(np.abs(seq - chk))))
    worst_fd = 0.0
    for _ in range(n_fd):
        p = _random_selective(rng, 4, 3)
        X = rng.normal(size=(6, 4))
        dY = rng.normal(size=(6, 4))
        grads, dX = selective_scan_backward(p, X, dY)
        num = _fd_selective(p, X.copy(), dY)
        ana = {n: getattr(grads, n) for n in ("A", "w_b", "w_c", "w_dt", "b_dt")} | {"X": dX}
        if fault:
            ana["A"] = ana["A"] * 1.01
        for k in num:
            scale = max(np.linalg.norm(num[k]), np.linalg.norm(ana[k]), 1e-12)
            worst_fd = max(worst_fd, float(np.linalg.norm(num[k] - ana[k]) / scale))
    ok = worst_eq <= 1e-6 and worst_fd <= 1e-3
    return ok, (f"sequential vs chunked max abs diff {worst_eq:.2e} (tol 1e-6); "
                f"backward vs finite differences max rel {worst_fd:.2e} (tol 1e-3)")


def propagate_oracle(Q_t, Z, Q_bar, F, k, W, b, alpha, beta):
    """Loop-by-loop neighbour search, projection, per-channel softmax and weighted sum."""
    N, C = Z.shape
    E = np.zeros((N, C))
    W_sums = np.zeros((N, k, C))
    for j in range(N):
        d2 = [(float(np.sum((Q_bar[i] - Q_t[j]) ** 2)), i) for i in range(len(Q_bar))]
        nbrs = [i for _, i in sorted(d2)[:k]]
        Fh = np.zeros((k, C))
        for a, i in enumerate(nbrs):
            for c in range(C):
                s = b[c]
                for m in range(C):
                    s += F[i, m] * W[m, c] + Z[j, m] * W[C + m, c]
                Fh[a, c] = alpha[c] * s + beta[c]
        for c in range(C):
            top = max(Fh[:, c])
            ex = [math.exp(Fh[a, c] - top) for a in range(k)]
            tot = sum(ex)
            for a in range(k):
                W_sums[j, a, c] = ex[a] / tot
                E[j, c] += ex[a] / tot * Fh[a, c]
    return E, W_sums


def check_propagate(fault: bool = False, n: int = 50, seed: int = 4):
    rng = np.random.default_rng(seed)
    cfg = Config(n_tokens=8, channels=8, k=4, memory_size=3, layers=1, state_dim=4)
    worst, worst_sum = 0.0, 0.0
    for _ in range(n):
        w = init_mip(cfg, rng)
        w.proj_w = rng.normal(size=(16, 8)) * 0.5
        w.proj_b = rng.normal(size=8)
        w.alpha = rng.uniform(0.5, 1.5, 8)
        w.beta = rng.normal(size=8)
        Q_t, Q_bar = rng.normal(size=(8, 3)), rng.normal(size=(24, 3))
        Z, F = rng.normal(size=(8, 8)), rng.normal(size=(24, 8))
        E, omega, _ = propagate(Q_t, Z, Q_bar, F, cfg, w, return_weights=True)
        ref, _ = propagate_oracle(Q_t, Z, Q_bar, F, 4, w.proj_w, w.proj_b, w.alpha, w.beta)
        if fault:
            E = E * (1 + 1e-4)
        worst = max(worst, float(np.max(np.abs(E - ref))))
        worst_sum = max(worst_sum, float(np.max(np.abs(omega.sum(axis=1) - 1.0))))
    ok = worst <= 1e-6 and worst_sum <= 1e-6
    return ok, f"max abs diff {worst:.2e}; neighbour-weight sum error {worst_sum:.2e} (tol 1e-6)"


def gfem_oracle(Z, E, w, scale: bool = True):
    N, C = Z.shape
    half = C // 2
    out = np.zeros((N, C))
    for gi, g in enumerate(w.groups):
        lo = gi * half
        z, e = Z[:, lo:lo + half], E[:, lo:lo + half]
        q, k, v = z @ g.wq, e @ g.wk, e @ g.wv
        for i in range(N):
            logits = [sum(q[i, c] * k[j, c] for c in range(half)) for j in range(len(E))]
            if scale:
                logits = [x / math.sqrt(half) for x in logits]
            top = max(logits)
            ex = [math.exp(x - top) for x in logits]
            tot = sum(ex)
            for j in range(len(E)):
                out[i, lo:lo + half] += ex[j] / tot * v[j]
    return out


def check_gfem(fault: bool = False, n: int = 50, seed: int = 5):
    rng = np.random.default_rng(seed)
    worst, leak = 0.0, 0.0
    for trial in range(n):
        w = init_gfem(8, rng)
        Z, E = rng.normal(size=(8, 8)), rng.normal(size=(24, 8))
        out = grouped_cross_attention(Z, E, w)
        if trial < 10:
            ref = gfem_oracle(Z, E, w)
            worst = max(worst, float(np.max(np.abs((out * (1 + 1e-4) if fault else out) - ref))))
        touched = int(rng.integers(2))
        Z2, E2 = Z.copy(), E.copy()
        sl = slice(4, 8) if touched else slice(0, 4)
        Z2[:, sl] += rng.normal(size=(8, 4))
        E2[:, sl] += rng.normal(size=(24, 4))
        if fault:
            Z2[:, 3 if touched else 4] += 1.0
        out2 = grouped_cross_attention(Z2, E2, w)
        keep = slice(0, 4) if touched else slice(4, 8)
        leak = max(leak, float(np.max(np.abs(out2[:, keep] - out[:, keep]))))
    ok = worst <= 1e-6 and leak <= 1e-7
    return ok, f"oracle max abs diff {worst:.2e} (tol 1e-6); cross-group leak {leak:.2e} (tol 1e-7)"


def mc_iou(a: Box7, b: Box7, rng: np.random.Generator, samples: int = 100_000) -> float:
    """Sample uniformly inside ``a`` and count hits in ``b``."""
    local = rng.uniform(-0.5, 0.5, (samples, 3)) * np.array([a.l, a.w, a.h])
    c, s = math.cos(a.theta), math.sin(a.theta)
    world = local @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]]) + a.center
    inb = np.all(np.abs(to_box_frame(world, b)) <= np.array([b.l, b.w, b.h]) / 2, axis=1)
    inter = inb.mean() * a.volume
    return float(inter / (a.volume + b.volume - inter))


def check_iou(fault: bool = False, n: int = 100, seed: int = 6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        a = Box7(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-np.pi, np.pi))
        b = Box7(*(a.center + rng.uniform(-1, 1, 3)), *rng.uniform(0.5, 3, 3),
                 rng.uniform(-np.pi, np.pi))
        got = iou3d(a, b) + (0.05 if fault else 0.0)
        worst = max(worst, abs(got - mc_iou(a, b, rng)))
    third = iou3d(Box7(0, 0, 0, 1, 1, 1, 0), Box7(0.5, 0, 0, 1, 1, 1, 0))
    exact = abs(third - 1 / 3)
    ok = worst <= 0.01 and exact <= 1e-9
    return ok, f"Monte Carlo max abs diff {worst:.4f} (tol 0.01); offset cubes |iou - 1/3| = {exact:.1e}"


def _brute_auc(values, thresholds, above: bool):
    counts = []
    for t in thresholds:
        c = 0
        for v in values:
            if (v > t) if above else (v < t):
                c += 1
        counts.append(c)
    n = len(values)
    return [Fraction(c, n) for c in counts], Fraction(sum(counts), len(thresholds) * n)


def check_metrics(fault: bool = False, n: int = 1000, seed: int = 7):
    rng = np.random.default_rng(seed)
    grid1 = [i / 100 for i in range(101)]
    grid2 = [2.0 * i / 100 for i in range(101)]
    mismatches = 0
    for trial in range(n):
        m = int(rng.integers(1, 40))
        ious = rng.uniform(0, 1, m)
        errs = rng.uniform(0, 2.5, m)
        if trial % 5 == 0:  # land exactly on grid points
            ious[: m // 2] = rng.integers(0, 101, m // 2) / 100
            errs[: m // 2] = 2.0 * rng.integers(0, 101, m // 2) / 100
        for vals, grid, above, fn in ((ious, grid1, True, success_auc),
                                      (errs, grid2, False, precision_auc)):
            fr, auc = _brute_auc(vals.tolist(), grid, above)
            curve = fn(vals)
            got = curve.auc + (1e-3 if fault else 0.0)
            if got != float(auc) or any(float(f) != g for f, g in zip(fr, curve.fractions)):
                mismatches += 1
    counts = {"Car": 6424, "Pedestrian": 6088, "Van": 1248, "Cyclist": 308}
    agg_err = 0.0
    for _ in range(20):
        sc = {c: (round(float(rng.uniform(30, 90)), 1), round(float(rng.uniform(30, 90)), 1))
              for c in counts}
        table = aggregate([Score(c, s, p, counts[c]) for c, (s, p) in sc.items()])
        tot = sum(counts.values())
        want_s = sum(Fraction(sc[c][0]) * counts[c] for c in counts) / tot
        want_p = sum(Fraction(sc[c][1]) * counts[c] for c in counts) / tot
        agg_err = max(agg_err, abs(table.mean.success - float(want_s)),
                      abs(table.mean.precision - float(want_p)))
    two = aggregate([Score("Car", 70.0, 0, 6424), Score("Pedestrian", 64.3, 0, 6088)]).mean.success
    agg_err = max(agg_err, abs(two - float(Fraction(700, 10) * 6424 + Fraction(643, 10) * 6088)
                               / 12512))
    ok = mismatches == 0 and agg_err <= 1e-9
    return ok, (f"{mismatches} AUC mismatches in {2 * n} curves; aggregate max error {agg_err:.1e}; "
                f"two-class mean {two:.4f}")


def check_losses(fault: bool = False, seed: int = 8, fit_steps: int = 200):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        N = 16
        Q = rng.normal(size=(N, 3))
        out = LocalizeOutput(rng.normal(size=N), rng.normal(0, 0.3, (N, 3)), rng.normal(size=N),
                             rng.normal(0, 0.3, (N, 4)), rng.normal(size=N), Q, 0.1)
        gt_box = Box7(0.2, -0.1, 0.0, 1.0, 2.0, 1.0, 0.3)
        mask = (rng.uniform(size=N) < 0.5).astype(float)
        mask[0] = 1.0
        tg = make_targets(out, mask, gt_box.center, gt_box)
        rep = losses_grad_check(out, tg)
        worst = max(worst, max(rep.errors.values()))
    spot_ln2 = abs(bce_with_logits(np.zeros(7), np.array([0, 1, 1, 0, 1, 0, 1.0])) - math.log(2))
    spot_l1 = abs(float(smooth_l1(np.array(0.5))) - 0.125)
    if fault:
        spot_l1 += 1e-6
    ratio = _fit_ratio(fit_steps)
    ok = worst <= 1e-4 and spot_ln2 <= 1e-9 and spot_l1 <= 1e-9 and ratio <= 0.5
    return ok, (f"FD max rel {worst:.2e} (tol 1e-4); spot errors {spot_ln2:.1e}, {spot_l1:.1e}; "
                f"fit loss ratio {ratio:.3f} (need <= 0.5)")


def _fit_ratio(steps: int) -> float:
    from .synthgen import generate, preset
    from .tracker import fit_head, segment_samples
    from .weights import init_weights

    cfg = Config()
    weights = init_weights(cfg, 0)
    samples = segment_samples(generate(preset("car-straight")), cfg, weights, 0, 8)
    hist = fit_head(samples, weights, cfg, steps=steps)
    return hist[-1] / hist[0]


CHECKS = {
    "zoh": (1, "ZOH discretisation vs matrix exponential", check_zoh),
    "lti": (2, "LTI scan vs kernel convolution", check_lti),
    "scan": (3, "selective scan: chunked and backward", check_scan),
    "propagate": (4, "propagation vs elementwise oracle", check_propagate),
    "gfem": (5, "grouped attention oracle and independence", check_gfem),
    "iou": (6, "rotated IoU vs Monte Carlo", check_iou),
    "metrics": (7, "AUC brute force and aggregation", check_metrics),
    "losses": (11, "loss gradients, spot values, fit", check_losses),
}


def run_all(fault: str | None = None, only=None) -> list[CheckResult]:
    """Run checks in order; ``fault`` names a check to corrupt (or ``"all"``)."""
    if fault is not None and fault != "all" and fault not in CHECKS:
        raise ValueError(f"unknown check {fault!r}")
    results = []
    for name, (_, title, fn) in CHECKS.items():
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        ok, detail = fn(fault=fault in (name, "all"))
        results.append(CheckResult(name, bool(ok), f"{title}: {detail}",
                                   time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"[{'PASS' if r.passed else 'FAIL'}] {r.name:<10} {r.seconds:6.2f}s  {r.detail}"
             for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed in {sum(r.seconds for r in results):.1f}s")
    return "\n".join(lines)
