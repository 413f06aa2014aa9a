"""Training objectives and their gradients with respect to their direct inputs.

Every function returns ``(value, grads)``. Batch reduction is a mean unless
``reduction="sum"`` is requested; the contrastive loss is always normalised
by N*M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError, PreconditionError
from .xbm import MemoryBank

LOG_CLAMP = 1e-12


def _reduce_scale(n, reduction):
    if reduction == "mean":
        return 1.0 / n
    if reduction == "sum":
        return 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


def hinge_d(real_scores, fake_scores, mismatch_scores):
    """Discriminator hinge loss over real, generated, and mismatched-caption scores.

    mean(relu(1 - real)) + 0.5 mean(relu(1 + fake)) + 0.5 mean(relu(1 + mismatch))
    """
    r = np.asarray(real_scores, dtype=np.float64)
    f = np.asarray(fake_scores, dtype=np.float64)
    m = np.asarray(mismatch_scores, dtype=np.float64)
    if not (r.shape == f.shape == m.shape) or r.ndim != 1:
        raise DimensionError("score vectors must be 1-D with equal lengths")
    n = r.shape[0]
    real_term = np.maximum(0.0, 1.0 - r)
    fake_term = np.maximum(0.0, 1.0 + f)
    mis_term = np.maximum(0.0, 1.0 + m)
    value = real_term.mean() + 0.5 * fake_term.mean() + 0.5 * mis_term.mean()
    g_r = np.where(r < 1.0, -1.0 / n, 0.0)
    g_f = np.where(f > -1.0, 0.5 / n, 0.0)
    g_m = np.where(m > -1.0, 0.5 / n, 0.0)
    return float(value), (g_r, g_f, g_m)


def hinge_g(fake_scores):
    f = np.asarray(fake_scores, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] < 1:
        raise DimensionError("need a non-empty 1-D score vector")
    n = f.shape[0]
    return float(-f.mean()), np.full(n, -1.0 / n)


def _check_labels(probs, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError("probabilities must be [N x K] with N labels")
    k = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise PreconditionError(f"label outside [0, {k})")
    return labels


def _nll(probs, labels, scale):
    """Sum of -log p[i, y_i] times ``scale`` and its gradient w.r.t. ``probs``."""
    rows = np.arange(probs.shape[0])
    p = probs[rows, labels]
    clamped = np.maximum(p, LOG_CLAMP)
    value = -scale * np.sum(np.log(clamped))
    grad = np.zeros_like(probs)
    grad[rows, labels] = np.where(p > LOG_CLAMP, -scale / clamped, 0.0)
    return value, grad


def ce_d(probs_fake, probs_real, labels, reduction="mean", literal=False):
    """Auxiliary-classifier loss for the discriminator: CE on fakes plus CE on reals.

    ``literal=True`` flips the sign of the real-sample term, reproducing the
    formula as typeset (which rewards misclassifying real samples).
    """
    pf = np.asarray(probs_fake, dtype=np.float64)
    pr = np.asarray(probs_real, dtype=np.float64)
    if pf.shape != pr.shape:
        raise DimensionError("fake and real probability matrices differ in shape")
    labels = _check_labels(pf, labels)
    scale = _reduce_scale(pf.shape[0], reduction)
    vf, gf = _nll(pf, labels, scale)
    vr, gr = _nll(pr, labels, scale)
    if literal:
        vr, gr = -vr, -gr
    return float(vf + vr), (gf, gr)


def ce_g(probs_fake, labels, reduction="mean"):
    pf = np.asarray(probs_fake, dtype=np.float64)
    labels = _check_labels(pf, labels)
    value, grad = _nll(pf, labels, _reduce_scale(pf.shape[0], reduction))
    return float(value), grad


def contrastive(E, labels, bank, alpha=0.5, literal=False):
    """Margin cosine loss of live embeddings against the memory bank.

    (1/(N*M)) sum_i [ sum_{j: y_i == y_j} (1 - cos_ij)
                     + sum_{j: y_i != y_j} max(cos_ij - alpha, 0) ]

    ``bank`` is a MemoryBank or an ``(E_mem, labels_mem)`` snapshot. Bank rows
    are constants: the returned gradient is with respect to ``E`` only.
    ``literal=True`` gives the negative-pair term a minus sign.
    """
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= alpha < 1.0:
        raise PreconditionError(f"margin must lie in [0, 1), got {alpha}")
    mem_E, mem_labels = bank.contents() if isinstance(bank, MemoryBank) else bank
    mem_E = np.asarray(mem_E, dtype=np.float64)
    mem_labels = np.asarray(mem_labels, dtype=np.int64)
    m = mem_E.shape[0]
    if m == 0:
        raise ContractError("contrastive loss needs a non-empty memory bank")
    if E.ndim != 2 or E.shape[1] != mem_E.shape[1] or labels.shape != (E.shape[0],):
        raise DimensionError("embedding / bank / label shapes are inconsistent")
    n = E.shape[0]
    cos = E @ mem_E.T
    pos = labels[:, None] == mem_labels[None, :]
    neg_active = ~pos & (cos > alpha)
    neg_sign = -1.0 if literal else 1.0
    scale = 1.0 / (n * m)
    value = scale * (np.sum(np.where(pos, 1.0 - cos, 0.0)) + neg_sign * np.sum(np.where(neg_active, cos - alpha, 0.0)))
    coef = scale * (np.where(pos, -1.0, 0.0) + neg_sign * neg_active)
    grad = coef @ mem_E
    return float(value), grad


# --------------------------------------------------------------------------
# totals


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    ce: float = 1.0
    cl: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components of one network for one update."""

    adv: float
    ce: float
    cl: float
    total: float


def _total(adv, ce, cl, weights: LossWeights, gate_open, prefix):
    if not gate_open:
        cl = 0.0
    for name, v in (("adv", adv), ("ce", ce), ("cl", cl)):
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss component {prefix}_{name}", component=f"{prefix}_{name}")
    total = weights.adv * adv + weights.ce * ce + weights.cl * cl
    return LossBreakdown(adv, ce, cl, total)


def total_d(adv, ce, cl, weights=LossWeights(), gate_open=True):
    return _total(adv, ce, cl, weights, gate_open, "loss_d")


def total_g(adv, ce, cl, weights=LossWeights(), gate_open=True):
    return _total(adv, ce, cl, weights, gate_open, "loss_g")
