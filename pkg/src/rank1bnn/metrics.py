"""Evaluation metrics: NLL, accuracy, ECE, ensemble diversity, corruption aggregates."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp


@dataclass
class MetricsReport:
    nll: float
    accuracy: float
    ece: float
    diversity: Optional[float] = None
    epoch: Optional[int] = None
    corruption: Dict[Tuple[str, int], Tuple[float, float, float]] = field(default_factory=dict)

    def record(self, **extra) -> dict:
        rec = {"nll": self.nll, "accuracy": self.accuracy, "ece": self.ece,
               "diversity": self.diversity}
        if self.epoch is not None:
            rec = {"epoch": self.epoch, **rec}
        rec.update(extra)
        return rec

    def records(self, **extra) -> List[dict]:
        """One JSON-ready dict for the clean evaluation plus one per corruption cell."""
        out = [self.record(**extra)]
        for (ctype, intensity), (n, a, e) in sorted(self.corruption.items()):
            out.append({"corruption_type": ctype, "intensity": intensity,
                        "nll": n, "accuracy": a, "ece": e, **extra})
        return out

    def to_jsonl(self, **extra) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records(**extra))


def ece(probs, labels, num_bins: int = 15) -> float:
    """Expected calibration error with equal-width bins on max-prob confidence."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.minimum((conf * num_bins).astype(np.intp), num_bins - 1)
    total = 0.0
    n = len(labels)
    for b in range(num_bins):
        mask = bins == b
        cnt = int(mask.sum())
        if cnt:
            total += cnt / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def accuracy(probs, labels) -> float:
    return float(np.mean(np.asarray(probs).argmax(axis=1) == np.asarray(labels)))


def diversity(predictions, accuracy: float) -> float:
    """Mean pairwise disagreement of member predictions, divided by (1 - accuracy)."""
    predictions = np.asarray(predictions)
    m = predictions.shape[0]
    if m < 2:
        raise ValueError("diversity needs at least two members")
    if accuracy >= 1.0:
        raise ValueError("diversity is undefined at accuracy 1")
    pairs = [np.mean(predictions[i] != predictions[j])
             for i, j in itertools.combinations(range(m), 2)]
    return float(np.mean(pairs) / (1.0 - accuracy))


def mixture_nll(member_log_probs, labels) -> float:
    """-mean_b [logsumexp_m log p_m(y_b) - log M] from ``[M, B, C]`` log-probabilities."""
    lp = np.asarray(member_log_probs)
    labels = np.asarray(labels)
    m, b, _ = lp.shape
    true = lp[:, np.arange(b), labels]
    return float(-np.mean(logsumexp(true, axis=0) - math.log(m)))


def average_nll(member_log_probs, labels) -> float:
    lp = np.asarray(member_log_probs)
    b = lp.shape[1]
    return float(-np.mean(lp[:, np.arange(b), np.asarray(labels)]))


def evaluate(member_log_probs, labels, num_bins: int = 15, epoch: Optional[int] = None) -> MetricsReport:
    """Metrics for an ensemble given per-member log-probabilities ``[M, B, C]``.

    NLL is the mixture NLL; accuracy and ECE use the averaged probabilities;
    diversity compares member argmax predictions (None when undefined).
    """
    lp = np.asarray(member_log_probs)
    labels = np.asarray(labels)
    mean_probs = np.exp(logsumexp(lp, axis=0) - math.log(lp.shape[0]))
    acc = accuracy(mean_probs, labels)
    div = None
    if lp.shape[0] > 1 and acc < 1.0:
        div = diversity(lp.argmax(axis=2), acc)
    return MetricsReport(nll=mixture_nll(lp, labels), accuracy=acc,
                         ece=ece(mean_probs, labels, num_bins), diversity=div, epoch=epoch)


def _triple(cell) -> Tuple[float, float, float]:
    if isinstance(cell, MetricsReport):
        return cell.nll, cell.accuracy, cell.ece
    nll, acc, ece_ = cell
    return nll, acc, ece_


def corruption_aggregate(reports: Dict[Tuple[str, int], object],
                         types: Optional[Iterable[str]] = None,
                         intensities: Optional[Iterable[int]] = None) -> Tuple[float, float, float]:
    """Unweighted (cNLL, cA, cECE) over a complete (type, intensity) grid.

    Cells may be MetricsReports or (nll, accuracy, ece) triples. The grid
    defaults to every type and intensity that appears in ``reports``.
    """
    types = sorted(set(types) if types is not None else {t for t, _ in reports})
    intensities = sorted(set(intensities) if intensities is not None else {i for _, i in reports})
    missing = [(t, i) for t in types for i in intensities if (t, i) not in reports]
    if missing:
        raise KeyError(f"corruption grid is missing cells: {missing}")
    cells = np.array([_triple(reports[(t, i)]) for t in types for i in intensities])
    if not len(cells):
        raise ValueError("empty corruption grid")
    means = cells.mean(axis=0)
    return float(means[0]), float(means[1]), float(means[2])
