"""Localisation and classification metrics: mask IOU, IOU summaries with a
detection rate, and plain accuracy."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_IOU_THRESHOLD = 0.4


def iou(predicted: np.ndarray, reference: np.ndarray) -> float:
    """Intersection over union of the 255-pixels of two masks.

    Two empty masks agree perfectly (1.0); one empty mask scores 0.0.
    """
    if predicted.shape != reference.shape:
        raise ValueError(f"mask shapes differ: {predicted.shape} vs {reference.shape}")
    a = predicted == 255
    b = reference == 255
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class IouReport:
    values: list[float]
    mean: float
    std: float
    detection_rate: float
    threshold: float


def iou_report(ious: Sequence[float], detection_threshold: float = DEFAULT_IOU_THRESHOLD) -> IouReport:
    """Mean, sample standard deviation (0 for a single value) and the fraction
    of values at or above ``detection_threshold``."""
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        raise ValueError("iou_report needs at least one value")
    if np.any((v < 0) | (v > 1)):
        raise ValueError("IOU values must lie in [0, 1]")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return IouReport(v.tolist(), float(v.mean()), std, float(np.mean(v >= detection_threshold)),
                     detection_threshold)


def accuracy(predictions: Sequence, references: Sequence) -> float:
    if len(predictions) != len(references):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(references)} references")
    if not predictions:
        raise ValueError("accuracy of an empty list is undefined")
    return sum(p == r for p, r in zip(predictions, references)) / len(predictions)


def format_iou_table(rows: dict[str, IouReport], digits: int = 3) -> str:
    """Aligned text table: one row per comparison, one column per image, then
    ``mean ± std`` and the detection rate."""
    n = max(len(r.values) for r in rows.values())
    header = ["", *[str(i + 1) for i in range(n)], "Average", "Detected"]
    body = []
    for name, r in rows.items():
        cells = [f"{x:.{digits}f}" for x in r.values] + [""] * (n - len(r.values))
        body.append([name, *cells, f"{r.mean:.{digits}f} ± {r.std:.{digits}f}", f"{r.detection_rate:.2f}"])
    table = [header, *body]
    widths = [max(len(row[c]) for row in table) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[c]) if c == 0 else cell.rjust(widths[c])
                       for c, cell in enumerate(row)) for row in table]
    return "\n".join(lines) + "\n"


def write_iou_csv(path, rows: dict[str, IouReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "image", "iou"])
        for name, r in rows.items():
            for i, x in enumerate(r.values, start=1):
                w.writerow([name, i, repr(x)])
            w.writerow([name, "mean", repr(r.mean)])
            w.writerow([name, "std", repr(r.std)])
            w.writerow([name, "detection_rate", repr(r.detection_rate)])
