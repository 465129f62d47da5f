"""Simplified box-prior localization head and its five-term loss.

Every token regresses a mask logit, a centre vote, a vote quality logit, a box
offset (dx, dy, dz, dtheta) relative to its vote, and a box quality logit. The
box of the highest box-quality token is returned; sizes come from the prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import macs
from .config import Config
from .geometry import Box7, normalize_angle

HEAD_OUT = 10
FIELDS = {
    "mask_logits": slice(0, 1),
    "votes": slice(1, 4),
    "vote_quality": slice(4, 5),
    "box_params": slice(5, 9),
    "box_quality": slice(9, 10),
}
TERMS = ("L_m", "L_c", "L_q", "L_s", "L_b")


@dataclass
class HeadWeights:
    w: np.ndarray  # (C, 10)
    b: np.ndarray  # (10,)


def init_head(channels: int, rng: np.random.Generator) -> HeadWeights:
    return HeadWeights(rng.normal(0.0, 0.01, (channels, HEAD_OUT)), np.zeros(HEAD_OUT))


@dataclass
class LocalizeOutput:
    mask_logits: np.ndarray   # (N,)
    votes: np.ndarray         # (N, 3) offsets from token coordinates
    vote_quality: np.ndarray  # (N,)
    box_params: np.ndarray    # (N, 4) offsets from vote centres
    box_quality: np.ndarray   # (N,)
    token_xyz: np.ndarray     # (N, 3)
    prior_theta: float = 0.0

    @property
    def vote_centers(self) -> np.ndarray:
        return self.token_xyz + self.votes

    @property
    def box_centers(self) -> np.ndarray:
        return self.vote_centers + self.box_params[:, :3]

    def copy(self) -> "LocalizeOutput":
        return LocalizeOutput(*(np.array(getattr(self, f), copy=True) for f in FIELDS),
                              self.token_xyz.copy(), self.prior_theta)


@dataclass
class LossBreakdown:
    L_m: float
    L_c: float
    L_q: float
    L_s: float
    L_b: float

    @property
    def total(self) -> float:
        return self.L_m + self.L_c + self.L_q + self.L_s + self.L_b

    def as_dict(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS} | {"total": self.total}


def head_forward(E_t: np.ndarray, w: HeadWeights) -> np.ndarray:
    if E_t.shape[1] != w.w.shape[0]:
        raise ValueError(f"features have {E_t.shape[1]} channels, head expects {w.w.shape[0]}")
    macs.add(E_t.shape[0] * E_t.shape[1] * HEAD_OUT, "head")
    return E_t @ w.w + w.b


def split_raw(raw: np.ndarray, Q_t: np.ndarray, prior_theta: float) -> LocalizeOutput:
    return LocalizeOutput(
        mask_logits=raw[:, 0].copy(),
        votes=raw[:, 1:4].copy(),
        vote_quality=raw[:, 4].copy(),
        box_params=raw[:, 5:9].copy(),
        box_quality=raw[:, 9].copy(),
        token_xyz=np.asarray(Q_t, dtype=np.float64),
        prior_theta=prior_theta,
    )


def select_box(out: LocalizeOutput, prior: Box7) -> tuple[int, Box7]:
    j = int(np.argmax(out.box_quality))  # first maximum wins ties
    c = out.box_centers[j]
    return j, Box7(c[0], c[1], c[2], prior.w, prior.l, prior.h,
                   prior.theta + out.box_params[j, 3])


def localize(Q_t, E_t, w: HeadWeights, prior: Box7) -> tuple[LocalizeOutput, Box7]:
    Q_t = np.asarray(Q_t, dtype=np.float64)
    E_t = np.asarray(E_t, dtype=np.float64)
    if len(Q_t) != len(E_t):
        raise ValueError(f"{len(Q_t)} token coordinates for {len(E_t)} feature rows")
    out = split_raw(head_forward(E_t, w), Q_t, prior.theta)
    _, box = select_box(out, prior)
    return out, box


def mask_probability(out: LocalizeOutput) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-out.mask_logits))


def foreground(out: LocalizeOutput) -> np.ndarray:
    """Hard foreground labels for reporting; the memory bank keeps the soft probabilities."""
    return out.mask_logits > 0.0


# ---------------------------------------------------------------------------
# Losses

@dataclass
class LossTargets:
    mask: np.ndarray      # (N,) in {0, 1}
    center: np.ndarray    # (3,)
    dtheta: float
    vote_pos: np.ndarray  # (N,) in {0, 1}
    box_pos: np.ndarray   # (N,) in {0, 1}


def make_targets(out: LocalizeOutput, gt_mask, gt_center, gt_box: Box7,
                 cfg: Config | None = None) -> LossTargets:
    """Quality targets mark proposals whose centre lands within ``quality_radius`` of the truth."""
    radius = (cfg or Config()).quality_radius
    center = np.asarray(gt_center, dtype=np.float64).reshape(3)
    vote_pos = np.linalg.norm(out.vote_centers - center, axis=1) < radius
    box_pos = np.linalg.norm(out.box_centers - center, axis=1) < radius
    return LossTargets(
        mask=np.asarray(gt_mask, dtype=np.float64).reshape(-1),
        center=center,
        dtheta=normalize_angle(gt_box.theta - out.prior_theta),
        vote_pos=vote_pos.astype(np.float64),
        box_pos=box_pos.astype(np.float64),
    )


def bce_with_logits(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))


def smooth_l1(r: np.ndarray, beta: float = 1.0) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def smooth_l1_grad(r: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return np.where(np.abs(r) < beta, r / beta, np.sign(r))


def _box_residual(out: LocalizeOutput, tg: LossTargets) -> np.ndarray:
    r = np.empty((len(out.votes), 4))
    r[:, :3] = out.box_centers - tg.center
    r[:, 3] = out.box_params[:, 3] - tg.dtheta
    return r


def loss_terms(out: LocalizeOutput, tg: LossTargets) -> LossBreakdown:
    fg = tg.mask > 0.5
    nf = int(fg.sum())
    L_m = bce_with_logits(out.mask_logits, tg.mask)
    L_q = bce_with_logits(out.vote_quality, tg.vote_pos)
    L_s = bce_with_logits(out.box_quality, tg.box_pos)
    if nf:
        L_c = float(np.sum((out.vote_centers[fg] - tg.center) ** 2) / (3 * nf))
        L_b = float(np.sum(smooth_l1(_box_residual(out, tg)[fg])) / (4 * nf))
    else:
        L_c = L_b = 0.0
    return LossBreakdown(L_m, L_c, L_q, L_s, L_b)


def losses(out: LocalizeOutput, gt_mask, gt_center, gt_box: Box7,
           cfg: Config | None = None) -> LossBreakdown:
    return loss_terms(out, make_targets(out, gt_mask, gt_center, gt_box, cfg))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def loss_grads(out: LocalizeOutput, tg: LossTargets) -> dict[str, dict[str, np.ndarray]]:
    """Analytic gradient of every loss term with respect to each head output field."""
    N = len(out.mask_logits)
    fg = (tg.mask > 0.5).astype(np.float64)
    nf = fg.sum()
    zeros = {f: np.zeros_like(getattr(out, f)) for f in FIELDS}
    grads = {t: {f: z.copy() for f, z in zeros.items()} for t in TERMS}
    grads["L_m"]["mask_logits"] = (_sigmoid(out.mask_logits) - tg.mask) / N
    grads["L_q"]["vote_quality"] = (_sigmoid(out.vote_quality) - tg.vote_pos) / N
    grads["L_s"]["box_quality"] = (_sigmoid(out.box_quality) - tg.box_pos) / N
    if nf:
        grads["L_c"]["votes"] = fg[:, None] * 2.0 * (out.vote_centers - tg.center) / (3 * nf)
        gr = fg[:, None] * smooth_l1_grad(_box_residual(out, tg)) / (4 * nf)
        grads["L_b"]["votes"] = gr[:, :3].copy()
        grads["L_b"]["box_params"] = gr
    return grads


def grads_to_raw(g: dict[str, np.ndarray]) -> np.ndarray:
    """Pack per-field gradients back into the (N, 10) head-output layout."""
    N = len(g["mask_logits"])
    raw = np.zeros((N, HEAD_OUT))
    for f, sl in FIELDS.items():
        raw[:, sl] = np.asarray(g[f]).reshape(N, -1)
    return raw


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())


def losses_grad_check(out: LocalizeOutput, tg: LossTargets, step: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic loss gradients with central differences on every head output.

    Quality targets stay fixed during the perturbations.
    """
    analytic = loss_grads(out, tg)
    errors = {}
    for term in TERMS:
        num, ana = [], []
        for f in FIELDS:
            base = getattr(out, f)
            for i in np.ndindex(base.shape):
                probe = out.copy()
                arr = getattr(probe, f)
                arr[i] = base[i] + step
                hi = getattr(loss_terms(probe, tg), term)
                arr[i] = base[i] - step
                lo = getattr(loss_terms(probe, tg), term)
                num.append((hi - lo) / (2 * step))
                ana.append(analytic[term][f][i])
        num, ana = np.array(num), np.array(ana)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        errors[term] = float(np.linalg.norm(num - ana) / scale)
    return GradCheckReport(errors, tol)
