"""Accuracy and error-over-time metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .solvers import Trajectory


class AlignmentError(ValueError):
    pass


@dataclass
class MetricReport:
    name: str
    value: float
    n: int
    tag: str = "final"

    def __post_init__(self):
        if self.name == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy {self.value} outside [0, 1]")
        if self.name == "mse" and self.value < 0:
            raise ValueError(f"negative mse {self.value}")


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.size == 0 or labels.size == 0:
        raise ValueError("accuracy of an empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows for {labels.shape[0]} labels")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def sign_accuracy(pred, target) -> float:
    """Accuracy for +/-1 targets scored by a scalar output (0 counts as negative)."""
    pred = np.asarray(pred).reshape(-1)
    labels = (np.asarray(target).reshape(-1) > 0).astype(np.int64)
    return accuracy(np.stack([-pred, pred], axis=1), labels)


def mse(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise AlignmentError(f"prediction {pred.shape} vs truth {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def mse_over_time(pred: Trajectory, truth: Trajectory) -> tuple[list[tuple[float, float]], float]:
    """Per-time MSE and their mean."""
    if len(pred.times) != len(truth.times) or not np.allclose(pred.times, truth.times, rtol=0, atol=1e-12):
        raise AlignmentError("prediction and truth are on different time grids")
    curve = [(float(t), mse(p, q)) for t, p, q in zip(pred.times, pred.states, truth.states)]
    if not curve:
        raise AlignmentError("empty trajectories")
    return curve, float(np.mean([v for _, v in curve]))


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mse"])
        for t, v in curve:
            w.writerow([repr(t), repr(v)])
