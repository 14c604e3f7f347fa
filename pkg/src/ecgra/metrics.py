"""Multi-label confusion counts, per-class precision/recall/F1 and overall F1."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLASSES, NUM_CLASSES
from .errors import DataError
from .store import decode_labels, encode_labels


def threshold_labels(probs, tau: float = 0.5) -> np.ndarray:
    """Class j is predicted iff prob_j >= tau; works row-wise on (N, 9) too."""
    return (np.asarray(probs) >= tau).astype(np.uint8)


def _rows(a) -> np.ndarray:
    a = np.asarray(a)
    if a.size == 0:
        return a.reshape(len(a), a.shape[-1] if a.ndim > 1 else NUM_CLASSES)
    return a.reshape(len(a), -1)


def _aligned(predictions, truths) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(predictions, dict) or isinstance(truths, dict):
        if not (isinstance(predictions, dict) and isinstance(truths, dict)):
            raise TypeError("pass both predictions and truths as id -> labels mappings, or both as arrays")
        if set(predictions) != set(truths):
            missing = sorted(set(truths) ^ set(predictions))
            raise DataError(f"prediction and truth ids differ: {', '.join(missing[:5])}")
        ids = sorted(truths)
        pred = np.array([predictions[i] for i in ids]).reshape(len(ids), -1)
        true = np.array([truths[i] for i in ids]).reshape(len(ids), -1)
    else:
        pred, true = _rows(predictions), _rows(truths)
    if pred.shape != true.shape:
        raise DataError(f"prediction shape {pred.shape} != truth shape {true.shape}")
    return pred.astype(bool), true.astype(bool)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @property
    def n(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0]) if len(self.tp) else 0


def confusion_counts(predictions, truths, num_classes: int = NUM_CLASSES) -> ConfusionCounts:
    pred, true = _aligned(predictions, truths)
    if pred.size == 0:
        z = np.zeros(num_classes, dtype=int)
        return ConfusionCounts(z, z.copy(), z.copy(), z.copy())
    return ConfusionCounts(
        tp=(true & pred).sum(axis=0),
        fp=(~true & pred).sum(axis=0),
        tn=(~true & ~pred).sum(axis=0),
        fn=(true & ~pred).sum(axis=0),
    )


def _ratio(num, den):
    num, den = np.asarray(num, float), np.asarray(den, float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def precision_recall_f1(counts: ConfusionCounts):
    """Per-class scores; any 0/0 is scored as 0."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1


def overall_f1(per_class_f1, num_classes: int = NUM_CLASSES) -> float:
    f1 = np.asarray(per_class_f1, dtype=float)
    if f1.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} per-class F1 values, got {f1.shape}")
    return float(f1.mean())


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    overall: float

    def __post_init__(self):
        c = self.counts
        totals = c.tp + c.fp + c.tn + c.fn
        if len(totals) and not np.all(totals == totals[0]):
            raise DataError("confusion counts do not add up to the same N for every class")

    @property
    def n(self) -> int:
        return self.counts.n

    def overall_over(self, classes) -> float:
        """Mean F1 restricted to a subset of classes."""
        idx = list(classes)
        return overall_f1(self.f1[idx], len(idx))


def evaluate(predictions, truths) -> MetricsReport:
    counts = confusion_counts(predictions, truths)
    p, r, f1 = precision_recall_f1(counts)
    return MetricsReport(counts, p, r, f1, overall_f1(f1, len(f1)))


REPORT_HEADER = ["class", "TP", "FP", "TN", "FN", "precision", "recall", "f1"]


def write_report(report: MetricsReport, path, class_names=CLASSES) -> tuple[Path, Path]:
    """Write ``<path>`` as CSV (9 class rows + Total) and ``<path>.txt`` as a table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c = report.counts
    rows = []
    for j, name in enumerate(class_names):
        rows.append([name, int(c.tp[j]), int(c.fp[j]), int(c.tn[j]), int(c.fn[j]),
                     f"{report.precision[j]:.6f}", f"{report.recall[j]:.6f}", f"{report.f1[j]:.6f}"])
    total = ["Total", int(c.tp.sum()), int(c.fp.sum()), int(c.tn.sum()), int(c.fn.sum()),
             f"{report.precision.mean():.6f}", f"{report.recall.mean():.6f}", f"{report.overall:.6f}"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(rows + [total])
    text = path.with_suffix(path.suffix + ".txt")
    widths = [7, 6, 6, 6, 6, 10, 10, 10]
    lines = ["".join(h.rjust(wd) for h, wd in zip(REPORT_HEADER, widths))]
    lines += ["".join(str(v).rjust(wd) for v, wd in zip(r, widths)) for r in rows + [total]]
    lines.append(f"N = {report.n}, overall F1 = {report.overall:.6f}")
    text.write_text("\n".join(lines) + "\n")
    return path, text


def read_report(path) -> dict[str, dict[str, float]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return {row["class"]: {k: float(v) for k, v in row.items() if k != "class"} for row in reader}


PRED_HEADER = ["id"] + [f"p{j}" for j in range(NUM_CLASSES)] + ["labels"]


@dataclass
class PredictionSet:
    ids: list[str]
    probs: np.ndarray  # (N, 9)
    tau: float = 0.5

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(len(self.ids), NUM_CLASSES)
        if not np.all(np.isfinite(self.probs)) or self.probs.min(initial=0) < 0 or self.probs.max(initial=0) > 1:
            raise DataError("probabilities must be finite and within [0, 1]")

    @property
    def labels(self) -> np.ndarray:
        return threshold_labels(self.probs, self.tau)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.labels))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PRED_HEADER)
            for rid, p, bits in zip(self.ids, self.probs, self.labels):
                w.writerow([rid] + [repr(float(v)) for v in p] + [decode_labels(bits)])

    @classmethod
    def read_csv(cls, path, tau: float = 0.5) -> "PredictionSet":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != PRED_HEADER:
            raise DataError(f"{path}: expected header {','.join(PRED_HEADER)}")
        ids, probs = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            try:
                ids.append(row[0])
                probs.append([float(v) for v in row[1:1 + NUM_CLASSES]])
                encode_labels(row[1 + NUM_CLASSES])
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed prediction row ({exc})") from None
        return cls(ids, np.array(probs).reshape(len(ids), NUM_CLASSES), tau)
