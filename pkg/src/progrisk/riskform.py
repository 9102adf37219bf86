"""Risk heads that turn one or two scan logits into event probabilities.

Three heads are provided:

``Baseline``
    Every scan is scored on its own, ``y_hat = sigmoid(logit)``.
``RiskForm1``
    The second-scan risk is ``1 - (1 - sigmoid(f1)) * (1 - sigmoid(f2))``
    with both logits from one scorer ``f``.
``RiskForm2``
    The second-scan risk is ``1 - (1 - sigmoid(f1)) * sigmoid(g2)`` where
    ``g`` is a separate scorer whose output is inversely related to risk.

For both composed heads the second risk can never fall below the first.
All probabilities are carried alongside their logs; the cross-entropy and
its gradient are evaluated in log space so confident logits neither
underflow nor produce ``log(0)``.

Every function accepts scalars or equally shaped arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit


class Formulation(str, enum.Enum):
    BASELINE = "Baseline"
    RISKFORM1 = "RiskForm1"
    RISKFORM2 = "RiskForm2"

    @property
    def n_scorers(self) -> int:
        return 2 if self is Formulation.RISKFORM2 else 1


@dataclass
class PairPrediction:
    kind: Formulation
    logit1: object
    logit2: object
    y1_hat: object
    y2_hat: object
    log_y1_hat: object
    log_one_minus_y1_hat: object
    log_y2_hat: object = None
    log_one_minus_y2_hat: object = None

    @property
    def has_second(self) -> bool:
        return self.y2_hat is not None


@dataclass
class PairLabels:
    y1: object
    y2: object = None
    horizon_years: int = 1

    def __post_init__(self):
        if self.horizon_years not in (1, 2, 4):
            raise ValueError(f"horizon_years must be 1, 2 or 4, got {self.horizon_years}")


def _finite(*logits):
    out = []
    for z in logits:
        arr = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        out.append(arr)
    return out


def _scalarize(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def log1mexp(c):
    """``log(1 - exp(c))`` for ``c <= 0`` without cancellation."""
    c = np.asarray(c, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(c > -np.log(2.0), np.log(-np.expm1(c)), np.log1p(-np.exp(c)))


def predict_single(f_logit):
    (z,) = _finite(f_logit)
    return _scalarize(expit(z))


def _single(kind, z1):
    return dict(kind=kind, logit1=_scalarize(z1), y1_hat=_scalarize(expit(z1)),
                log_y1_hat=_scalarize(log_expit(z1)), log_one_minus_y1_hat=_scalarize(log_expit(-z1)))


def predict_first(f_logit1, kind=Formulation.BASELINE) -> PairPrediction:
    """Prediction for a knee with only its first scan."""
    (z1,) = _finite(f_logit1)
    return PairPrediction(logit2=None, y2_hat=None, **_single(Formulation(kind), z1))


def _composed(kind, z1, z2, log_keep2, floor):
    # log(1 - y2_hat) = log(1 - y1_hat) + log(multiplier)
    log_not2 = log_expit(-z1) + log_keep2
    # the max only acts at rounding level; it makes y2_hat >= floor exact in floating point
    y2 = np.maximum(-np.expm1(log_not2), floor)
    return PairPrediction(
        logit2=_scalarize(z2),
        y2_hat=_scalarize(y2),
        log_y2_hat=_scalarize(log1mexp(log_not2)),
        log_one_minus_y2_hat=_scalarize(log_not2),
        **_single(kind, z1),
    )


def predict_pair_form1(f_logit1, f_logit2) -> PairPrediction:
    z1, z2 = _finite(f_logit1, f_logit2)
    return _composed(Formulation.RISKFORM1, z1, z2, log_expit(-z2), np.maximum(expit(z1), expit(z2)))


def predict_pair_form2(f_logit1, g_logit2) -> PairPrediction:
    z1, z2 = _finite(f_logit1, g_logit2)
    return _composed(Formulation.RISKFORM2, z1, z2, log_expit(z2), expit(z1))


def predict_baseline_pair(f_logit1, f_logit2) -> PairPrediction:
    z1, z2 = _finite(f_logit1, f_logit2)
    return PairPrediction(
        logit2=_scalarize(z2),
        y2_hat=_scalarize(expit(z2)),
        log_y2_hat=_scalarize(log_expit(z2)),
        log_one_minus_y2_hat=_scalarize(log_expit(-z2)),
        **_single(Formulation.BASELINE, z1),
    )


PAIR_HEADS = {
    Formulation.BASELINE: predict_baseline_pair,
    Formulation.RISKFORM1: predict_pair_form1,
    Formulation.RISKFORM2: predict_pair_form2,
}


def predict_pair(kind, logit1, logit2) -> PairPrediction:
    return PAIR_HEADS[Formulation(kind)](logit1, logit2)


def bce_terms(kind, z1, z2, y1, y2):
    """Elementwise composed BCE for paired scans and its logit gradients.

    Returns ``(loss, dloss/dz1, dloss/dz2)`` arrays where ``loss`` is
    ``BCE(y1, y1_hat) + BCE(y2, y2_hat)`` under head ``kind``.
    """
    kind = Formulation(kind)
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    s1 = expit(z1)
    loss1 = -(y1 * log_expit(z1) + (1.0 - y1) * log_expit(-z1))
    d1 = s1 - y1
    if kind is Formulation.BASELINE:
        loss2 = -(y2 * log_expit(z2) + (1.0 - y2) * log_expit(-z2))
        return loss1 + loss2, d1, expit(z2) - y2

    if kind is Formulation.RISKFORM1:
        log_keep = log_expit(-z2)
        dkeep_dz2 = -expit(z2)
    else:
        log_keep = log_expit(z2)
        dkeep_dz2 = expit(-z2)
    c = log_expit(-z1) + log_keep  # log(1 - y2_hat)
    loss2 = -(y2 * log1mexp(c) + (1.0 - y2) * c)
    # d log(y2_hat) / dc = -1 / expm1(-c); d log(1 - y2_hat) / dc = 1
    with np.errstate(over="ignore"):
        dloss2_dc = y2 / np.expm1(-c) - (1.0 - y2)
    return loss1 + loss2, d1 + dloss2_dc * (-s1), dloss2_dc * dkeep_dz2


def bce_single(z1, y1):
    """BCE of a lone first scan and its gradient with respect to the logit."""
    z1 = np.asarray(z1, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    loss = -(y1 * log_expit(z1) + (1.0 - y1) * log_expit(-z1))
    return loss, expit(z1) - y1


def pair_loss(pred: PairPrediction, labels: PairLabels):
    """Total BCE loss and its gradient with respect to the input logits.

    Returns ``(loss, grad)`` where ``grad`` holds one entry per logit used
    by ``pred`` (``[d/dz1]`` for a single scan, ``[d/dz1, d/dz2]`` for a pair).
    For array-valued predictions the loss is summed and ``grad`` has shape
    ``(n_logits, n)``.
    """
    if pred.has_second != (labels.y2 is not None):
        raise ValueError("prediction and labels disagree on whether a second scan is present")
    if not pred.has_second:
        loss, d1 = bce_single(pred.logit1, labels.y1)
        return _scalarize(np.sum(loss)), np.stack([np.asarray(d1, dtype=float)])
    loss, d1, d2 = bce_terms(pred.kind, pred.logit1, pred.logit2, labels.y1, labels.y2)
    return _scalarize(np.sum(loss)), np.stack([np.asarray(d1, dtype=float), np.asarray(d2, dtype=float)])


def clamp_for_export(p, lo: float = 1e-12):
    """Clip probabilities into ``[lo, 1 - lo]``; for serialised risks only."""
    return np.clip(p, lo, 1.0 - lo)
