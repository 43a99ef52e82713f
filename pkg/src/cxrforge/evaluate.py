"""Confusion matrix, classification metrics, and report emission.

Precision and recall are one-vs-rest per class with unweighted macro
averages; a zero denominator makes the rate undefined (None), which is
distinct from 0 and rendered as the literal ``undefined`` in reports.
Predictions are the argmax of each probability row, breaking exact ties
toward the lowest class index. Per-class predicted-probability confidence
intervals use the normal approximation mean +- z * s / sqrt(n) with the
sample standard deviation.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, load_and_resize
from .model import ModelGraph, predict
from .tensor import Tensor

Z_VALUES = {0.90: 1.644854, 0.95: 1.959964, 0.99: 2.575829}


class ConfusionMatrix:
    """K x K counts; rows are actual classes, columns predicted classes."""

    def __init__(self, counts, class_names: Sequence[str]):
        arr = np.asarray(counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
            raise ValueError(f"confusion matrix must be square and non-empty, got {arr.shape}")
        if len(class_names) != arr.shape[0]:
            raise ValueError(f"{len(class_names)} names for a {arr.shape[0]}-class matrix")
        if (arr < 0).any():
            raise ValueError("confusion matrix entries must be nonnegative")
        self.counts = arr
        self.class_names = list(class_names)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.class_names == other.class_names
            and bool((self.counts == other.counts).all())
        )

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()}, {self.class_names})"


def confusion_matrix(
    predicted: Sequence[int], actual: Sequence[int], k: int, class_names: Sequence[str] | None = None
) -> ConfusionMatrix:
    predicted = np.asarray(predicted, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if predicted.shape != actual.shape:
        raise ValueError(
            f"predicted ({predicted.shape}) and actual ({actual.shape}) lengths differ"
        )
    for name, idx in (("predicted", predicted), ("actual", actual)):
        if idx.size and (idx.min() < 0 or idx.max() >= k):
            raise ValueError(f"{name} class index out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (actual, predicted), 1)
    if class_names is None:
        class_names = [f"class{i}" for i in range(k)]
    return ConfusionMatrix(counts, class_names)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def per_class_precision(cm: ConfusionMatrix, c: int) -> float | None:
    """TP / (TP + FP) for class c; None when nothing was predicted as c."""
    denom = int(cm.col_sums()[c])
    return None if denom == 0 else float(cm.counts[c, c]) / denom


def per_class_recall(cm: ConfusionMatrix, c: int) -> float | None:
    """TP / (TP + FN) for class c; None when class c has no actual samples."""
    denom = int(cm.row_sums()[c])
    return None if denom == 0 else float(cm.counts[c, c]) / denom


def macro_metrics(cm: ConfusionMatrix) -> tuple[float | None, float | None]:
    """Unweighted means of per-class precision/recall; undefined if any
    per-class value is undefined."""
    precisions = [per_class_precision(cm, c) for c in range(cm.k)]
    recalls = [per_class_recall(cm, c) for c in range(cm.k)]
    macro_p = None if any(p is None for p in precisions) else sum(precisions) / cm.k
    macro_r = None if any(r is None for r in recalls) else sum(recalls) / cm.k
    return macro_p, macro_r


def class_probability_ci(
    probs: Sequence[float], confidence: float = 0.95
) -> tuple[float, float, float]:
    """(mean, lower, upper) for the mean predicted probability, clamped to [0, 1]."""
    z = Z_VALUES.get(confidence)
    if z is None:
        raise ValueError(f"confidence must be one of {sorted(Z_VALUES)}, got {confidence}")
    arr = np.asarray(probs, dtype=np.float64)
    if arr.size < 2:
        raise ValueError(f"confidence interval needs n >= 2 samples, got {arr.size}")
    mean = float(arr.mean())
    # constant input has zero variance exactly; bypass the accumulated
    # rounding that np.std would otherwise surface as a sliver of width
    sd = 0.0 if np.all(arr == arr[0]) else float(arr.std(ddof=1))
    half = z * sd / math.sqrt(arr.size)
    return mean, max(mean - half, 0.0), min(mean + half, 1.0)


@dataclass
class ClassStats:
    name: str
    count: int
    precision: float | None
    recall: float | None
    prob_mean: float | None
    prob_ci_lower: float | None
    prob_ci_upper: float | None


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float | None
    macro_recall: float | None
    per_class: list[ClassStats]
    total: int


def _report_from(cm: ConfusionMatrix, true_class_probs: list[list[float]]) -> MetricsReport:
    macro_p, macro_r = macro_metrics(cm)
    per_class = []
    for c, name in enumerate(cm.class_names):
        probs = true_class_probs[c]
        if len(probs) >= 2:
            mean, lo, hi = class_probability_ci(probs)
        elif len(probs) == 1:
            mean, lo, hi = float(probs[0]), None, None
        else:
            mean = lo = hi = None
        per_class.append(
            ClassStats(
                name=name,
                count=int(cm.row_sums()[c]),
                precision=per_class_precision(cm, c),
                recall=per_class_recall(cm, c),
                prob_mean=mean,
                prob_ci_lower=lo,
                prob_ci_upper=hi,
            )
        )
    return MetricsReport(
        accuracy=accuracy(cm),
        macro_precision=macro_p,
        macro_recall=macro_r,
        per_class=per_class,
        total=cm.total,
    )


def evaluate(
    model: ModelGraph,
    manifest: DatasetManifest,
    split: str,
    batch_size: int = 32,
) -> tuple[MetricsReport, ConfusionMatrix]:
    """Predict a split (no augmentation) and assemble every metric above."""
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    class_index = {c: i for i, c in enumerate(manifest.classes)}
    k = len(manifest.classes)
    target = model.input_shape[-1]

    predicted: list[int] = []
    actual: list[int] = []
    true_class_probs: list[list[float]] = [[] for _ in range(k)]
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack([load_and_resize(r.path, target).data for r in chunk])
        probs = predict(model, Tensor(images)).data
        for row, rec in zip(probs, chunk):
            a = class_index[rec.label]
            actual.append(a)
            predicted.append(int(row.argmax()))
            true_class_probs[a].append(float(row[a]))

    cm = confusion_matrix(predicted, actual, k, manifest.classes)
    return _report_from(cm, true_class_probs), cm


def report_from_matrix(
    cm: ConfusionMatrix, true_class_probs: list[list[float]] | None = None
) -> MetricsReport:
    """Metrics for an already-tallied confusion matrix (no probabilities)."""
    if true_class_probs is None:
        true_class_probs = [[] for _ in range(cm.k)]
    return _report_from(cm, true_class_probs)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["actual", *cm.class_names])
        for name, row in zip(cm.class_names, cm.counts):
            writer.writerow([name, *row.tolist()])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[1:]
        rows = {row[0]: [int(v) for v in row[1:]] for row in reader}
    return ConfusionMatrix([rows[n] for n in names], names)


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value", "class"])
        writer.writerow(["accuracy", _fmt(report.accuracy), ""])
        writer.writerow(["macro_precision", _fmt(report.macro_precision), ""])
        writer.writerow(["macro_recall", _fmt(report.macro_recall), ""])
        writer.writerow(["count", report.total, ""])
        for s in report.per_class:
            writer.writerow(["precision", _fmt(s.precision), s.name])
            writer.writerow(["recall", _fmt(s.recall), s.name])
            writer.writerow(["prob_mean", _fmt(s.prob_mean), s.name])
            writer.writerow(["prob_ci_lower", _fmt(s.prob_ci_lower), s.name])
            writer.writerow(["prob_ci_upper", _fmt(s.prob_ci_upper), s.name])
            writer.writerow(["count", s.count, s.name])


def render_report(report: MetricsReport, cm: ConfusionMatrix, out_dir, stream=None) -> dict:
    """Write confusion.csv and metrics.csv under out_dir and print an aligned
    plain-text summary. Returns the written paths."""
    if not cm.class_names:
        raise ValueError("cannot render a report without class names")
    stream = stream or sys.stdout
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "confusion": out_dir / "confusion.csv",
            "metrics": out_dir / "metrics.csv",
        }
        write_confusion_csv(cm, paths["confusion"])
        write_metrics_csv(report, paths["metrics"])
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc

    width = max(len(n) for n in cm.class_names) + 2
    header = "".join(n.rjust(width) for n in cm.class_names)
    print("confusion matrix (rows = actual, cols = predicted)", file=stream)
    print(" " * width + header, file=stream)
    for name, row in zip(cm.class_names, cm.counts):
        cells = "".join(str(v).rjust(width) for v in row.tolist())
        print(name.rjust(width) + cells, file=stream)
    print(f"\naccuracy        {_fmt(report.accuracy)}", file=stream)
    print(f"macro precision {_fmt(report.macro_precision)}", file=stream)
    print(f"macro recall    {_fmt(report.macro_recall)}", file=stream)
    rows = []
    for s in report.per_class:
        ci = (
            f"[{_fmt(s.prob_ci_lower)}, {_fmt(s.prob_ci_upper)}]"
            if s.prob_ci_lower is not None
            else "undefined"
        )
        rows.append(
            f"{s.name.rjust(width)}  {_fmt(s.precision):>9}  {_fmt(s.recall):>9}  "
            f"{_fmt(s.prob_mean):>9}  {ci}"
        )
    print(f"\n{'class'.rjust(width)}  {'precision':>9}  {'recall':>9}  {'prob mean':>9}  95% CI", file=stream)
    for line in rows:
        print(line, file=stream)
    return paths
