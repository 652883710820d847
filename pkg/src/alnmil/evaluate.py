"""Slide-level aggregation and the clinical metric suite.

Undefined metrics (0/0, or AUROC with a single class present) are ``None``
and are written as ``NA``.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

METRIC_NAMES = ["auroc", "accuracy", "sensitivity", "specificity", "ppv", "npv", "f1"]
METRIC_TITLES = ["AUROC", "Accuracy", "Sensitivity", "Specificity", "PPV", "NPV", "F1-Score"]
METRICS_HEADER = ["cohort", "class", *METRIC_NAMES]


@dataclass
class SlidePrediction:
    slide_id: str
    probs: np.ndarray
    label: int


@dataclass
class MetricsReport:
    auroc: float | None = None
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    ppv: float | None = None
    npv: float | None = None
    f1: float | None = None
    cohort: str = ""
    cls: str = "positive"
    run: str = ""
    counts: dict = field(default_factory=dict)

    def values(self) -> list[float | None]:
        return [getattr(self, k) for k in METRIC_NAMES]

    @property
    def undefined(self) -> list[str]:
        return [k for k in METRIC_NAMES if getattr(self, k) is None]


def aggregate_slide(bag_probs: Sequence[np.ndarray], method: str = "mean") -> np.ndarray:
    """Combine per-bag class probabilities of one slide.

    ``mean`` averages; ``max`` takes the per-class max and renormalizes;
    ``vote`` returns the fraction of bags whose argmax is each class.
    """
    probs = np.asarray(bag_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("aggregate_slide needs at least one bag probability vector")
    if method == "mean":
        return probs.mean(axis=0)
    if method == "max":
        m = probs.max(axis=0)
        return m / m.sum()
    if method == "vote":
        return np.bincount(probs.argmax(axis=1), minlength=probs.shape[1]) / probs.shape[0]
    raise ValueError(f"unknown aggregation {method!r}")


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUROC: (concordant + tied/2) / (n_pos * n_neg), ties counted exactly.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    # tie groups of equal score
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos_in = np.add.reduceat(y.astype(np.int64), starts)
    size = np.diff(np.r_[starts, s.size])
    neg_in = size - pos_in
    neg_below = np.cumsum(neg_in) - neg_in
    concordant = int((pos_in * neg_below).sum())
    tied = int((pos_in * neg_in).sum())
    return (2 * concordant + tied) / (2 * n_pos * n_neg)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points; a sample is positive when score >= threshold.

    The first point uses threshold +inf; one point follows per distinct score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    points = [(0.0, 0.0, float("inf"))]
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        tpr = (pred & labels).sum() / n_pos if n_pos else float("nan")
        fpr = (pred & ~labels).sum() / n_neg if n_neg else float("nan")
        points.append((float(fpr), float(tpr), float(thr)))
    return points


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int, auroc: float | None = None, **tags) -> MetricsReport:
    sens = _ratio(tp, tp + fn)
    ppv = _ratio(tp, tp + fp)
    if sens is None or ppv is None or ppv + sens == 0:
        f1 = None
    else:
        f1 = 2 * ppv * sens / (ppv + sens)
    return MetricsReport(
        auroc=auroc,
        accuracy=_ratio(tp + tn, tp + fp + tn + fn),
        sensitivity=sens,
        specificity=_ratio(tn, tn + fp),
        ppv=ppv,
        npv=_ratio(tn, tn + fn),
        f1=f1,
        counts={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        **tags,
    )


def confusion_metrics(scores, labels, threshold: float = 0.5, **tags) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    tn = int((~pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    return metrics_from_counts(tp, fp, tn, fn, auroc=roc_auc(scores, labels), **tags)


def multiclass_metrics(probs, labels, class_names: Sequence[str] | None = None, **tags) -> list[MetricsReport]:
    """One-vs-rest reports per class: argmax decisions, AUROC from that class's probability column."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    names = list(class_names) if class_names else [str(c) for c in range(k)]
    pred = probs.argmax(axis=1)
    reports = []
    for c in range(k):
        truth = labels == c
        called = pred == c
        tp = int((called & truth).sum())
        fp = int((called & ~truth).sum())
        tn = int((~called & ~truth).sum())
        fn = int((~called & truth).sum())
        reports.append(metrics_from_counts(tp, fp, tn, fn, auroc=roc_auc(probs[:, c], truth), cls=names[c], **tags))
    return reports


def slide_reports(preds: Sequence[SlidePrediction], cohort: str, task: str = "binary",
                  threshold: float = 0.5, class_names: Sequence[str] | None = None, run: str = "") -> list[MetricsReport]:
    probs = np.stack([p.probs for p in preds])
    labels = np.array([p.label for p in preds])
    if task == "binary":
        return [confusion_metrics(probs[:, 1], labels == 1, threshold, cohort=cohort, run=run)]
    return multiclass_metrics(probs, labels, class_names, cohort=cohort, run=run)


def mean_auroc(preds: Sequence[SlidePrediction]) -> float | None:
    """Positive-class AUROC for two classes; mean of defined one-vs-rest AUROCs otherwise."""
    if not preds:
        return None
    probs = np.stack([p.probs for p in preds])
    labels = np.array([p.label for p in preds])
    if probs.shape[1] == 2:
        return roc_auc(probs[:, 1], labels == 1)
    aucs = [roc_auc(probs[:, c], labels == c) for c in range(probs.shape[1])]
    aucs = [a for a in aucs if a is not None]
    return float(np.mean(aucs)) if aucs else None


def predict_slides(model, bags: Iterable, aggregate: str = "mean") -> list[SlidePrediction]:
    """Forward every bag, then aggregate bag probabilities per slide (sorted by slide id)."""
    from .milnet import predict_proba

    per_slide, labels = defaultdict(list), {}
    for bag in bags:
        per_slide[bag.slide_id].append(predict_proba(model, bag.instances, bag.clinical))
        labels[bag.slide_id] = bag.label
    return [SlidePrediction(sid, aggregate_slide(per_slide[sid], aggregate), labels[sid]) for sid in sorted(per_slide)]


# -- output ---------------------------------------------------------------------

def _fmt(v: float | None, digits: int) -> str:
    return "NA" if v is None else f"{v:.{digits}f}"


def report(metrics: Sequence[MetricsReport], fmt: str = "markdown") -> str:
    """Render reports as a Markdown table or as the metrics CSV."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in metrics:
            writer.writerow([m.cohort, m.cls, *(_fmt(v, 6) for v in m.values())])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    head = ["Run", "Cohort", "Class", *METRIC_TITLES]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for m in metrics:
        cells = [m.run, m.cohort, m.cls, *(_fmt(v, 3) for v in m.values())]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def read_metrics_csv(path, run: str = "") -> list[MetricsReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        out = []
        for row in reader:
            vals = {k: None if row[k] == "NA" else float(row[k]) for k in METRIC_NAMES}
            out.append(MetricsReport(cohort=row["cohort"], cls=row["class"], run=run, **vals))
        return out


def roc_csv(points: Sequence[tuple[float, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fpr", "tpr", "threshold"])
    for fpr, tpr, thr in points:
        writer.writerow([f"{fpr:.6f}", f"{tpr:.6f}", "inf" if np.isinf(thr) else f"{thr:.6f}"])
    return buf.getvalue()
