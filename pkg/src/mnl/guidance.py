"""Confidence margins, guidance selection and the negative-learning losses.

Modalities are 0-indexed. A sample's guidance is *active* when one modality
(the robust dominant modality, RDM) beats the others on the selection
criterion; every other modality is then an inferior modality (IM) for that
sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mnl.numerics import PROB_FLOOR, cross_entropy, softmax

GUIDANCE_MODES = ("robust", "confident", "prior")
GUIDANCE_SCOPES = ("non-target", "all-class")
STAGES = ("warmup", "full")


def ucom(logits, y):
    """Margin between the target logit and the strongest competitor.

    Returns ``(xi, j)``; ties for the competitor go to the lowest index.
    Works on a single vector or row-wise on a batch.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least 2 classes")
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    yy = np.atleast_1d(np.asarray(y)).astype(np.intp)
    rows = np.arange(z2.shape[0])
    masked = z2.copy()
    masked[rows, yy] = -np.inf
    j = masked.argmax(axis=1)
    xi = z2[rows, yy] - z2[rows, j]
    if single:
        return float(xi[0]), int(j[0])
    return xi, j


def per_class_margin(logits, y, j):
    z = np.asarray(logits, dtype=np.float64)
    if np.any(np.asarray(j) == np.asarray(y)):
        raise ValueError("competing class must differ from the target")
    if z.ndim == 1:
        return float(z[y] - z[j])
    rows = np.arange(z.shape[0])
    return z[rows, y] - z[rows, j]


def normalized_ucom(probs, y, j):
    """Probability-space margin ``P_y - P_j``."""
    P = np.atleast_2d(probs)
    rows = np.arange(P.shape[0])
    return P[rows, np.atleast_1d(y)] - P[rows, np.atleast_1d(j)]


@dataclass
class GuidanceDecision:
    rdm: np.ndarray  # -1 where inactive
    active: np.ndarray
    mode: str

    def __len__(self):
        return len(self.active)

    def im_mask(self, m: int) -> np.ndarray:
        return self.active & (self.rdm != m)

    @property
    def rate(self) -> float:
        return float(self.active.mean()) if len(self.active) else 0.0


def _unique_strict_max(*scores: np.ndarray) -> np.ndarray:
    """Index of the column that strictly beats every other column on all
    score matrices (B, M), or -1."""
    B, M = scores[0].shape
    out = np.full(B, -1, dtype=np.int64)
    for m in range(M):
        wins = np.ones(B, dtype=bool)
        for s in scores:
            others = np.delete(s, m, axis=1)
            wins &= np.all(s[:, m:m + 1] > others, axis=1)
        out[wins] = m
    return out


def select_guidance(probs, xi, y, mode: str = "robust", prior_rdm: int = 0) -> GuidanceDecision:
    """Pick the guiding modality per sample.

    ``probs`` is a list of per-modality probability arrays, ``xi`` the
    matching list of margins. Strict inequalities throughout; ties leave the
    sample unguided.
    """
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    P = [np.atleast_2d(p) for p in probs]
    yy = np.atleast_1d(np.asarray(y)).astype(np.intp)
    rows = np.arange(P[0].shape[0])
    py = np.stack([p[rows, yy] for p in P], axis=1)
    M = py.shape[1]
    if mode == "prior":
        if not 0 <= prior_rdm < M:
            raise ValueError(f"prior RDM {prior_rdm} out of range")
        rdm = np.full(len(rows), prior_rdm, dtype=np.int64)
    elif mode == "confident":
        rdm = _unique_strict_max(py)
    else:
        xs = np.stack([np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in xi], axis=1)
        rdm = _unique_strict_max(py, xs)
    return GuidanceDecision(rdm, rdm >= 0, mode)


def _floored_ce_grad(weights, q, single):
    """Logit gradient of ``-sum_k weights_k * log max(q_k, floor)``.

    Classes below the floor are constant in the loss and drop out.
    """
    live = np.where(q >= PROB_FLOOR, weights, 0.0)
    g = live.sum(axis=1, keepdims=True) * q - live
    return g[0] if single else g


def mnl_loss(p_rdm, p_im, y):
    """Negative-learning loss ``-sum_{k != y} P_rdm[k] * log P_im[k]``."""
    a = np.atleast_2d(np.asarray(p_rdm, dtype=np.float64))
    q = np.atleast_2d(np.asarray(p_im, dtype=np.float64))
    yy = np.atleast_1d(np.asarray(y)).astype(np.intp)
    rows = np.arange(a.shape[0])
    abar = a.copy()
    abar[rows, yy] = 0.0
    out = -(abar * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=1)
    return float(out[0]) if np.ndim(p_rdm) == 1 else out


def mnl_grad_logits(p_rdm, z_im, y):
    """Gradient of :func:`mnl_loss` w.r.t. the inferior modality's logits.

    ``p_rdm`` is a constant here (stop-gradient).
    """
    a = np.atleast_2d(np.asarray(p_rdm, dtype=np.float64))
    q = softmax(np.atleast_2d(z_im))
    yy = np.atleast_1d(np.asarray(y)).astype(np.intp)
    rows = np.arange(a.shape[0])
    abar = a.copy()
    abar[rows, yy] = 0.0
    return _floored_ce_grad(abar, q, np.ndim(p_rdm) == 1)


def allclass_guidance_loss(p_rdm, p_im, y=None):
    """Cross-entropy of the IM against the full RDM distribution."""
    a = np.atleast_2d(np.asarray(p_rdm, dtype=np.float64))
    q = np.atleast_2d(np.asarray(p_im, dtype=np.float64))
    out = -(a * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=1)
    return float(out[0]) if np.ndim(p_rdm) == 1 else out


def allclass_grad_logits(p_rdm, z_im, y=None):
    a = np.atleast_2d(np.asarray(p_rdm, dtype=np.float64))
    q = softmax(np.atleast_2d(z_im))
    return _floored_ce_grad(a, q, np.ndim(p_rdm) == 1)


GUIDANCE_LOSSES = {
    "non-target": (mnl_loss, mnl_grad_logits),
    "all-class": (allclass_guidance_loss, allclass_grad_logits),
}


@dataclass
class LossBreakdown:
    fused_ce: float
    modal_ce: list[float]
    mnl: float
    lam: float
    total: float
    active: np.ndarray
    stage: str = "full"
    scope: str = "non-target"

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


def _onehot_grad(logits, y):
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    return g


def total_loss(bundle, decision: GuidanceDecision | None, y, lam: float = 1.0, stage: str = "full",
               scope: str = "non-target", ce_weights=None, reduction: str = "active",
               rdm_probs=None):
    """Fused CE + per-modality CE + lam * guidance loss, with logit gradients.

    Returns ``(breakdown, grad_fused, grad_modal)``. The guidance term is 0
    during warm-up, when ``lam == 0`` or when no sample is active. With
    ``reduction="active"`` it is averaged over guided samples only; with
    ``"all"`` over the whole batch. ``rdm_probs`` replaces the guiding
    probabilities (defaults to the bundle's own, detached).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if scope not in GUIDANCE_SCOPES:
        raise ValueError(f"unknown guidance scope {scope!r}")
    if reduction not in ("active", "all"):
        raise ValueError(f"unknown reduction {reduction!r}")
    y = np.asarray(y, dtype=np.intp)
    B = len(y)
    M = bundle.n_modalities
    cw = np.ones(M) if ce_weights is None else np.asarray(ce_weights, dtype=np.float64)

    fused_ce = float(cross_entropy(bundle.fused, y).mean())
    grad_fused = _onehot_grad(bundle.fused, y) / B
    modal_ce, grad_modal = [], []
    for m in range(M):
        modal_ce.append(float(cross_entropy(bundle.logits[m], y).mean()))
        grad_modal.append(cw[m] * _onehot_grad(bundle.logits[m], y) / B)

    use_guidance = stage == "full" and lam > 0 and decision is not None and decision.active.any()
    mnl = 0.0
    active = decision.active.copy() if use_guidance else np.zeros(B, dtype=bool)
    if use_guidance:
        loss_fn, grad_fn = GUIDANCE_LOSSES[scope]
        src = bundle.probs if rdm_probs is None else rdm_probs
        stacked = np.stack(src)
        denom = active.sum() if reduction == "active" else B
        per_sample = np.zeros(B)
        for m in range(M):
            mask = decision.im_mask(m)
            if not mask.any():
                continue
            idx = np.nonzero(mask)[0]
            a = stacked[decision.rdm[idx], idx]
            per_sample[idx] += loss_fn(a, bundle.probs[m][idx], y[idx])
            grad_modal[m][idx] += (lam / denom) * grad_fn(a, bundle.logits[m][idx], y[idx])
        mnl = float(per_sample.sum() / denom)

    total = fused_ce + float(np.dot(cw, modal_ce)) + lam * mnl
    bd = LossBreakdown(fused_ce, modal_ce, mnl, float(lam), total, active, stage, scope)
    return bd, grad_fused, grad_modal
