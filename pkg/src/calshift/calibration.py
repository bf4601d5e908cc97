"""Accuracy, expected calibration error and reliability-diagram data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ProbBatch

DEFAULT_BINS = 15


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    empirical_accuracy: float


@dataclass
class CalibrationReport:
    ece: float
    bins: list[ReliabilityBin] = field(default_factory=list)
    accuracy: float = 0.0
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_csv(self, path: str | Path) -> None:
        """Reliability-diagram rows for external plotting."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lower", "bin_upper", "count", "mean_conf", "emp_acc"])
            for b in self.bins:
                w.writerow([repr(b.lower), repr(b.upper), b.count, repr(b.mean_confidence), repr(b.empirical_accuracy)])


def _checked(pb: ProbBatch) -> ProbBatch:
    if len(pb) == 0:
        raise ValueError("cannot score an empty batch")
    pb.validate()
    return pb


def bin_index(confidence, num_bins: int):
    """0-based bin for right-closed equal-width bins on (0, 1]; 0 maps to the first bin."""
    idx = np.ceil(np.asarray(confidence) * num_bins).astype(np.int64) - 1
    return np.clip(idx, 0, num_bins - 1)


def accuracy(pb: ProbBatch) -> float:
    _checked(pb)
    # np.argmax returns the lowest index on ties
    return float(np.mean(np.argmax(pb.probs, axis=1) == pb.labels))


def ece(pb: ProbBatch, num_bins: int = DEFAULT_BINS) -> CalibrationReport:
    _checked(pb)
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    n = len(pb)
    conf = pb.probs.max(axis=1)
    correct = (np.argmax(pb.probs, axis=1) == pb.labels).astype(np.float64)
    idx = bin_index(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    hit_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    # fsum is exactly rounded, so the result does not depend on sample order
    order = np.argsort(idx, kind="stable")
    groups = np.split(conf[order], np.cumsum(counts)[:-1])
    conf_sum = [math.fsum(g) for g in groups]
    bins = []
    total = 0.0
    for k in range(num_bins):
        c = int(counts[k])
        mc = conf_sum[k] / c if c else 0.0
        acc = hit_sum[k] / c if c else 0.0
        if c:
            total += (c / n) * abs(acc - mc)
        bins.append(ReliabilityBin(k / num_bins, (k + 1) / num_bins, c, float(mc), float(acc)))
    return CalibrationReport(float(total), bins, float(correct.mean()), n)


def brute_force_ece(pb: ProbBatch, num_bins: int = DEFAULT_BINS) -> float:
    """Per-sample loop reference for :func:`ece`."""
    _checked(pb)
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    members: dict[int, list[tuple[float, float]]] = {}
    for row, label in zip(pb.probs.tolist(), pb.labels.tolist()):
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        c = row[best]
        k = max(1, math.ceil(c * num_bins)) if c > 0 else 1
        k = min(k, num_bins)
        members.setdefault(k, []).append((c, 1.0 if best == label else 0.0))
    n = len(pb)
    total = 0.0
    for k in sorted(members):
        rows = members[k]
        mc = sum(r[0] for r in rows) / len(rows)
        acc = sum(r[1] for r in rows) / len(rows)
        total += len(rows) / n * abs(acc - mc)
    return total
