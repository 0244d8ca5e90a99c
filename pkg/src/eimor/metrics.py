"""Per-class AP / AUC / S2 and their macro means."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    return scores, labels


def average_precision(scores, labels) -> float:
    """Non-interpolated AP; ties in score keep their original order."""
    scores, labels = _check(scores, labels)
    P = labels.sum()
    if P == 0:
        raise UndefinedMetricError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].sum() / P)


def auc(scores, labels) -> float:
    """ROC AUC via the rank-sum form of the Mann-Whitney statistic (ties count 1/2)."""
    scores, labels = _check(scores, labels)
    P, N = labels.sum(), (~labels).sum()
    if P == 0 or N == 0:
        raise UndefinedMetricError("AUC needs both positives and negatives")
    uniq, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    midrank = np.cumsum(counts) - (counts - 1) / 2.0
    rank_sum = midrank[inv][labels].sum()
    return float((rank_sum - P * (P + 1) / 2.0) / (P * N))


def harmonic_s2(sensitivity: float, specificity: float) -> float:
    total = sensitivity + specificity
    return 0.0 if total == 0 else 2.0 * sensitivity * specificity / total


def s2(decisions, labels) -> float:
    """Harmonic mean of sensitivity and specificity for binary decisions."""
    decisions = np.asarray(decisions).astype(bool)
    labels = np.asarray(labels).astype(bool)
    P, N = labels.sum(), (~labels).sum()
    if P == 0 or N == 0:
        raise UndefinedMetricError("S2 needs both positives and negatives")
    sens = (decisions & labels).sum() / P
    spec = (~decisions & ~labels).sum() / N
    return harmonic_s2(float(sens), float(spec))


def decisions_from_scores(probs: np.ndarray, multilabel: bool) -> np.ndarray:
    """Hard ``[N, C]`` decisions: one-vs-rest argmax, or 0.5 threshold when multilabel."""
    probs = np.asarray(probs)
    if multilabel:
        return probs >= 0.5
    return np.eye(probs.shape[1], dtype=bool)[probs.argmax(axis=1)]


@dataclass
class EvalReport:
    per_class: list[dict]
    macro: dict
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "macro": self.macro, "counts": self.counts}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def aggregate(per_class: list[dict], counts: dict | None = None) -> EvalReport:
    """Unweighted macro means over the classes where each metric is defined."""
    macro = {}
    for key, name in (("ap", "map"), ("auc", "mauc"), ("s2", "ms2")):
        vals = [c[key] for c in per_class if c.get(key) is not None]
        macro[name] = float(np.mean(vals)) if vals else None
    return EvalReport(per_class, macro, dict(counts or {}))


def evaluate(probs, labels, multilabel: bool = False) -> EvalReport:
    """Per-class metrics of ``[N, C]`` scores against ``[N, C]`` binary labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    decisions = decisions_from_scores(probs, multilabel)
    per_class, skipped = [], []
    for c in range(probs.shape[1]):
        entry = {}
        for key, fn, arg in (("ap", average_precision, probs[:, c]), ("auc", auc, probs[:, c]),
                             ("s2", s2, decisions[:, c])):
            try:
                entry[key] = fn(arg, labels[:, c])
            except UndefinedMetricError:
                entry[key] = None
        if entry["ap"] is None:
            skipped.append(c)
            warnings.warn(f"class {c} has no positives; skipped in macro AP", stacklevel=2)
        per_class.append(entry)
    counts = {"samples": int(probs.shape[0]), "classes": int(probs.shape[1]),
              "positives": labels.sum(axis=0).astype(int).tolist(), "skipped": skipped}
    return aggregate(per_class, counts)
