"""Scan-level discrimination metrics.

AUROC is the Mann-Whitney statistic with ties counted as one half. AUPRC is
average precision without interpolation: tied scores form a single
threshold. Confidence intervals are percentile bootstrap intervals over
scans, and two correlated AUROCs are compared with DeLong's test using the
midrank (Sun & Xu) formulation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata


class SingleClassError(ValueError):
    """Raised when a metric needs both classes and only one is present."""


@dataclass(frozen=True)
class PredictionRecord:
    knee_id: str
    subject_id: str
    scan_index: int
    risk: float
    label: int
    klg: int
    group: str
    horizon: int
    outer_fold: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.risk <= 1.0:
            raise ValueError(f"risk must lie in [0, 1], got {self.risk}")


@dataclass
class MetricReport:
    auroc: Optional[float] = None
    auroc_ci: Optional[Tuple[float, float]] = None
    auprc: Optional[float] = None
    auprc_ci: Optional[Tuple[float, float]] = None
    n_pos: int = 0
    n_neg: int = 0
    delong_p_vs_reference: Optional[float] = None
    reason: Optional[str] = None

    @property
    def absent(self) -> bool:
        return self.auroc is None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("auroc_ci", "auprc_ci"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


def records_to_arrays(records: Sequence[PredictionRecord]):
    scores = np.array([r.risk for r in records], dtype=float)
    labels = np.array([r.label for r in records], dtype=int)
    return scores, labels


def _check(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be 1-D of equal length, got {scores.shape} and {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(int)


def auroc(scores, labels) -> float:
    """Area under the ROC curve with midrank tie handling.

    Raises ``SingleClassError`` unless both classes are present.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over descending unique score thresholds."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise SingleClassError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    precision = tp / seen
    # integer recall steps, divided once, so a perfect ranking gives exactly 1
    return float(np.sum(np.diff(np.r_[0, tp]) * precision) / n_pos)


def _auroc_rows(scores2d, labels2d):
    ranks = rankdata(scores2d, axis=1)
    n_pos = labels2d.sum(axis=1)
    n_neg = labels2d.shape[1] - n_pos
    rank_sum = np.where(labels2d == 1, ranks, 0.0).sum(axis=1)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def bootstrap_ci(scores, labels, metric: str = "auroc", n_resamples: int = 2000,
                 level: float = 0.95, seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap interval, resampling scans with replacement.

    Resamples that contain a single class are discarded and redrawn; at most
    ``10 * n_resamples`` draws are attempted.
    """
    scores, labels = _check(scores, labels)
    if metric not in ("auroc", "auprc"):
        raise ValueError(f"metric must be 'auroc' or 'auprc', got {metric!r}")
    if n_resamples < 100:
        raise ValueError("n_resamples must be at least 100")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if metric == "auroc":
        auroc(scores, labels)
    else:
        auprc(scores, labels)

    n = scores.size
    rng = np.random.default_rng(seed)
    values = []
    attempts = 0
    cap = 10 * n_resamples
    chunk = max(1, min(n_resamples, 2_000_000 // max(n, 1)))
    while len(values) < n_resamples:
        if attempts >= cap:
            raise RuntimeError(
                f"bootstrap gave only {len(values)} usable resamples in {cap} draws; input too imbalanced")
        size = min(chunk, cap - attempts)
        idx = rng.integers(0, n, size=(size, n))
        attempts += size
        y = labels[idx]
        n_pos = y.sum(axis=1)
        keep = (n_pos > 0) & (n_pos < n) if metric == "auroc" else n_pos > 0
        idx, y = idx[keep], y[keep]
        if metric == "auroc":
            values.extend(_auroc_rows(scores[idx], y).tolist())
        else:
            values.extend(auprc(scores[row], yy) for row, yy in zip(idx, y))
    values = np.asarray(values[:n_resamples])
    alpha = 1.0 - level
    lo, hi = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def _midrank_components(scores, labels):
    """Per-positive and per-negative placement values; each averages to the AUROC."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = pos.size, neg.size
    t_all = rankdata(np.r_[pos, neg])
    t_pos = rankdata(pos)
    t_neg = rankdata(neg)
    v10 = (t_all[:m] - t_pos) / n
    v01 = 1.0 - (t_all[m:] - t_neg) / m
    return v10, v01


def delong_test(risks_a, risks_b, labels):
    """DeLong comparison of two AUROCs computed on the same scans.

    Returns ``(auroc_a, auroc_b, two_sided_p)``. When the variance of the
    AUROC difference is below ``1e-15`` the p-value is reported as 1.0.
    """
    risks_a, labels_a = _check(risks_a, labels)
    risks_b, _ = _check(risks_b, labels)
    if risks_a.shape != risks_b.shape:
        raise ValueError("risk vectors must be aligned")
    n_pos = int(labels_a.sum())
    if n_pos == 0 or n_pos == labels_a.size:
        raise SingleClassError("DeLong test needs both classes")
    m, n = n_pos, labels_a.size - n_pos
    v10a, v01a = _midrank_components(risks_a, labels_a)
    v10b, v01b = _midrank_components(risks_b, labels_a)
    auc_a = auroc(risks_a, labels_a)
    auc_b = auroc(risks_b, labels_a)
    if m > 1:
        s10 = np.cov(np.vstack([v10a, v10b]))
    else:
        s10 = np.zeros((2, 2))
    if n > 1:
        s01 = np.cov(np.vstack([v01a, v01b]))
    else:
        s01 = np.zeros((2, 2))
    s = s10 / m + s01 / n
    var = s[0, 0] + s[1, 1] - 2.0 * s[0, 1]
    if not var >= 1e-15:
        return auc_a, auc_b, 1.0
    z = (auc_a - auc_b) / np.sqrt(var)
    p = 2.0 * norm.sf(abs(z))
    return auc_a, auc_b, float(min(1.0, p))


def metric_report(scores, labels, n_resamples: int = 2000, level: float = 0.95, seed: int = 0,
                  reference_scores=None) -> MetricReport:
    """AUROC/AUPRC with bootstrap intervals, or an absent report with a reason.

    ``n_resamples=0`` skips the intervals.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if labels.size == 0:
        return MetricReport(n_pos=0, n_neg=0, reason="empty")
    if n_pos == 0 or n_neg == 0:
        return MetricReport(n_pos=n_pos, n_neg=n_neg, reason="single_class")
    report = MetricReport(auroc=auroc(scores, labels), auprc=auprc(scores, labels), n_pos=n_pos, n_neg=n_neg)
    if n_resamples:
        # widen to cover the point estimate, which percentile intervals can miss on small samples
        lo, hi = bootstrap_ci(scores, labels, "auroc", n_resamples, level, seed)
        report.auroc_ci = (min(lo, report.auroc), max(hi, report.auroc))
        lo, hi = bootstrap_ci(scores, labels, "auprc", n_resamples, level, seed)
        report.auprc_ci = (min(lo, report.auprc), max(hi, report.auprc))
    if reference_scores is not None:
        report.delong_p_vs_reference = delong_test(scores, reference_scores, labels)[2]
    return report
