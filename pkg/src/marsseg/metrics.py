"""Pixel accuracy, confusion matrices and per-class recall over labeled pixels."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import CLASS_NAMES, NULL_LABEL, NUM_CLASSES


class NoLabeledPixelsError(ValueError):
    pass


def _flatten(predictions, labels):
    p = np.asarray(predictions)
    t = np.asarray(labels)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and labels {t.shape} differ in shape")
    p = p.astype(np.int64).ravel()
    t = t.astype(np.int64).ravel()
    keep = t != NULL_LABEL
    return p[keep], t[keep]


def pixel_accuracy(predictions, labels) -> float:
    p, t = _flatten(predictions, labels)
    if t.size == 0:
        raise NoLabeledPixelsError("no labeled pixels to score")
    return float(np.mean(p == t))


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion counts must be {NUM_CLASSES}x{NUM_CLASSES}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise NoLabeledPixelsError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def normalized(self) -> np.ndarray:
        """Row percentages; rows without any true pixels are NaN."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = 100.0 * self.counts / rows
        out[rows[:, 0] == 0] = np.nan
        return out

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(predictions, labels) -> ConfusionMatrix:
    p, t = _flatten(predictions, labels)
    if t.size and (t.min() < 0 or t.max() >= NUM_CLASSES):
        raise ValueError("label values outside the class range")
    if p.size and (p.min() < 0 or p.max() >= NUM_CLASSES):
        raise ValueError("prediction values outside the class range")
    counts = np.bincount(t * NUM_CLASSES + p, minlength=NUM_CLASSES ** 2)
    return ConfusionMatrix(counts.reshape(NUM_CLASSES, NUM_CLASSES))


def per_class_recall(cm: ConfusionMatrix) -> list[Optional[float]]:
    """Diagonal over row sums; None where a class has no true pixels."""
    rows = cm.counts.sum(axis=1)
    return [float(cm.counts[c, c] / rows[c]) if rows[c] else None for c in range(NUM_CLASSES)]


def fmt_recall(r: Optional[float]) -> str:
    return "n/a" if r is None else f"{r:.6f}"


def write_confusion_csvs(cm: ConfusionMatrix, out_dir: Path | str) -> None:
    out_dir = Path(out_dir)
    header = ["true\\pred"] + list(CLASS_NAMES)
    with open(out_dir / "confusion_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for name, row in zip(CLASS_NAMES, cm.counts):
            w.writerow([name] + [int(v) for v in row])
    norm = cm.normalized()
    with open(out_dir / "confusion_normalized.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for name, row in zip(CLASS_NAMES, norm):
            w.writerow([name] + ["n/a" if np.isnan(v) else f"{v:.4f}" for v in row])
    with open(out_dir / "recall.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class", "recall", "true_pixels"])
        rows = cm.counts.sum(axis=1)
        for c, r in enumerate(per_class_recall(cm)):
            w.writerow([c, CLASS_NAMES[c], fmt_recall(r), int(rows[c])])


def write_class_distribution_csv(counts: Sequence[int], path: Path | str) -> None:
    counts = np.asarray(counts, dtype=np.int64)
    total = counts.sum()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class", "pixels", "share", "log10_pixels"])
        for c, n in enumerate(counts):
            share = n / total if total else 0.0
            w.writerow([c, CLASS_NAMES[c], int(n), f"{share:.6f}", f"{np.log10(n):.4f}" if n else "n/a"])
