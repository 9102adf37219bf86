"""Soft-constraint penalties added on top of independent per-scan BCE.

``ConReg`` pulls the penultimate representations of two scans of the same
knee together when their labels agree and pushes them at least a margin
apart when they differ. ``RiskReg`` is a hinge on the difference of
log-sigmoid scores of the two scans. Both are zero-subgradient at their
kinks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from .riskform import Formulation, PairLabels, PairPrediction, bce_terms


class RegKind(str, enum.Enum):
    CONREG = "ConReg"
    RISKREG = "RiskReg"
    BOTH = "Both"


@dataclass(frozen=True)
class RegConfig:
    """Penalty weights and margins.

    ``margin_m`` is the RiskReg margin; ``contrastive_margin`` is the ConReg
    margin. One ``gamma`` weights every active penalty.
    """

    kind: RegKind = RegKind.RISKREG
    margin_m: float = 2.0
    gamma: float = 1.0
    contrastive_margin: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", RegKind(self.kind))
        if not self.margin_m > 0 or not self.contrastive_margin > 0:
            raise ValueError("margins must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @property
    def uses_contrastive(self) -> bool:
        return self.kind in (RegKind.CONREG, RegKind.BOTH)

    @property
    def uses_ranking(self) -> bool:
        return self.kind in (RegKind.RISKREG, RegKind.BOTH)


def contrastive_terms(h1, h2, y_siam, margin_m):
    """Row-wise contrastive loss on ``(..., k)`` representations.

    Returns ``(loss, dloss/dh1, dloss/dh2)``.
    """
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    if h1.shape != h2.shape:
        raise ValueError(f"representation shapes differ: {h1.shape} vs {h2.shape}")
    y = np.asarray(y_siam, dtype=float)
    diff = h2 - h1
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    gap = np.maximum(0.0, margin_m - dist)
    loss = y * dist**2 + (1.0 - y) * gap**2
    # d/d(diff) of gap**2 is -2 gap diff / dist; zero at dist == 0 and past the margin
    with np.errstate(divide="ignore", invalid="ignore"):
        push = np.where(gap > 0, -2.0 * gap / dist, 0.0)
    push = np.where(dist > 0, push, 0.0)
    coef = y * 2.0 + (1.0 - y) * push
    g2 = coef[..., None] * diff
    return loss, -g2, g2


def contrastive_loss(h1, h2, y_siam, margin_m: float = 1.0):
    """Contrastive loss between two representation vectors.

    ``y_siam = 1`` marks a pair with equal labels. Returns
    ``(loss, grad_h1, grad_h2)``.
    """
    if margin_m <= 0:
        raise ValueError("margin_m must be positive")
    loss, g1, g2 = contrastive_terms(h1, h2, y_siam, margin_m)
    return float(np.sum(loss)), g1, g2


def riskreg_terms(z1, z2, margin_m):
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    arg = log_expit(z1) - log_expit(z2) + margin_m
    active = arg > 0
    loss = np.where(active, arg, 0.0)
    d1 = np.where(active, expit(-z1), 0.0)
    d2 = np.where(active, -expit(-z2), 0.0)
    return loss, d1, d2, arg


def riskreg_loss(f_logit1, f_logit2, margin_m: float = 2.0):
    """``max(0, log sigmoid(f1) - log sigmoid(f2) + m)`` and its logit gradients."""
    z = np.asarray([f_logit1, f_logit2], dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if margin_m <= 0:
        raise ValueError("margin_m must be positive")
    loss, d1, d2, _ = riskreg_terms(z[0], z[1], margin_m)
    return float(loss), float(d1), float(d2)


@dataclass
class RegularizedLoss:
    loss: float
    d_logit1: object
    d_logit2: object
    d_penultimate1: Optional[np.ndarray]
    d_penultimate2: Optional[np.ndarray]


def regularized_terms(z1, z2, y1, y2, h1, h2, config: RegConfig):
    """Row-wise baseline BCE plus the configured penalties.

    ``h1``/``h2`` may be ``None`` when the config has no contrastive term.
    Returns ``(loss, dz1, dz2, dh1, dh2)`` with ``dh*`` ``None`` when unused.
    """
    loss, d1, d2 = bce_terms(Formulation.BASELINE, z1, z2, y1, y2)
    dh1 = dh2 = None
    if config.gamma == 0:
        return loss, d1, d2, dh1, dh2
    if config.uses_contrastive:
        y_siam = (np.asarray(y1) == np.asarray(y2)).astype(float)
        lc, g1, g2 = contrastive_terms(h1, h2, y_siam, config.contrastive_margin)
        loss = loss + config.gamma * lc
        dh1, dh2 = config.gamma * g1, config.gamma * g2
    if config.uses_ranking:
        lr, r1, r2, _ = riskreg_terms(z1, z2, config.margin_m)
        loss = loss + config.gamma * lr
        d1 = d1 + config.gamma * r1
        d2 = d2 + config.gamma * r2
    return loss, d1, d2, dh1, dh2


def total_regularized_loss(pred: PairPrediction, labels: PairLabels, traces, config: RegConfig) -> RegularizedLoss:
    """Baseline-head BCE on both scans plus ``gamma`` times the penalties.

    ``traces`` is the pair of forward traces for scan 1 and scan 2; only
    their penultimate representations are read.
    """
    if pred.kind is not Formulation.BASELINE:
        raise ValueError("regularized training scores each scan independently; pass a Baseline prediction")
    if not pred.has_second or labels.y2 is None:
        raise ValueError("regularized loss needs both scans; use plain BCE for single-scan knees")
    t1, t2 = traces
    loss, d1, d2, dh1, dh2 = regularized_terms(
        pred.logit1, pred.logit2, labels.y1, labels.y2, t1.penultimate, t2.penultimate, config)
    loss = float(np.sum(loss))
    if np.ndim(d1) == 0:
        d1, d2 = float(d1), float(d2)
    return RegularizedLoss(loss, d1, d2, dh1, dh2)
