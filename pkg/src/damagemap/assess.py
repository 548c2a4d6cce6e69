"""Damage assessment values and the two-threshold severity classifier."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SEVERITY_LABELS = ("none", "mild", "severe")
BINARY_LABELS = ("damage", "no_damage")
NORMALIZATIONS = ("none", "max")


@dataclass(frozen=True)
class DavRecord:
    image_id: str
    dav: float
    label: str | None = None

    def __post_init__(self):
        if not self.dav >= 0:
            raise ValueError(f"{self.image_id}: DAV must be >= 0, got {self.dav}")


@dataclass(frozen=True)
class ThresholdClassifier:
    c1: float
    c2: float

    def __post_init__(self):
        if self.c1 > self.c2:
            raise ValueError(f"c1 ({self.c1}) must not exceed c2 ({self.c2})")

    def __call__(self, value: float) -> str:
        return classify_dav(self, value)


def dav(grid: np.ndarray, normalize: str = "none") -> float:
    """Mean of the saliency grid.

    ``normalize="max"`` divides the grid by its maximum first (zero grids stay
    zero); the default reports the raw mean.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.size == 0:
        raise ValueError("DAV of an empty grid is undefined")
    if normalize not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalize!r}")
    if normalize == "max":
        peak = g.max()
        if peak > 0:
            g = g / peak
    return float(g.sum() / g.size)


def classify_dav(clf: ThresholdClassifier, value: float) -> str:
    if value < clf.c1:
        return "none"
    if value <= clf.c2:
        return "mild"
    return "severe"


def candidate_thresholds(values: Iterable[float]) -> np.ndarray:
    """Midpoints between consecutive distinct values, with -inf/+inf sentinels."""
    v = np.unique(np.asarray(list(values), dtype=np.float64))
    mids = (v[:-1] + v[1:]) / 2 if v.size > 1 else np.array([])
    return np.concatenate([[-np.inf], mids, [np.inf]])


def fit_thresholds(records: Sequence[DavRecord]):
    """Grid search for the (c1, c2) pair with the highest training accuracy.

    Candidates are all pairs c1 <= c2 from :func:`candidate_thresholds`; ties
    go to the lexicographically smallest pair. Returns ``(classifier, accuracy)``.
    """
    if not records:
        raise ValueError("cannot fit thresholds on an empty record list")
    bad = {r.label for r in records} - set(SEVERITY_LABELS)
    if bad:
        raise ValueError(f"labels must be one of {SEVERITY_LABELS}, got {sorted(map(str, bad))}")
    values = np.array([r.dav for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records])
    cand = candidate_thresholds(values)

    def lt(label):
        return np.searchsorted(np.sort(values[labels == label]), cand, side="left")

    def le(label):
        return np.searchsorted(np.sort(values[labels == label]), cand, side="right")

    n_severe = int(np.sum(labels == "severe"))
    # correct[i, j] with c1 = cand[i], c2 = cand[j]
    correct = (lt("none")[:, None]
               + le("mild")[None, :] - lt("mild")[:, None]
               + n_severe - le("severe")[None, :])
    valid = np.triu(np.ones_like(correct, dtype=bool))
    correct = np.where(valid, correct, -1)
    i, j = np.unravel_index(np.argmax(correct), correct.shape)
    return ThresholdClassifier(float(cand[i]), float(cand[j])), float(correct[i, j]) / len(records)


@dataclass
class DavHistogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]
    densities: dict[str, np.ndarray]

    def rows(self):
        for cls in self.counts:
            for b in range(len(self.edges) - 1):
                yield (float(self.edges[b]), float(self.edges[b + 1]), cls,
                       int(self.counts[cls][b]), float(self.densities[cls][b]))


def dav_histogram(records: Sequence[DavRecord], bins: int = 20, key=lambda r: r.label) -> DavHistogram:
    """Per-class binned DAV mass over shared edges spanning [0, max DAV]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    values = np.array([r.dav for r in records], dtype=np.float64)
    top = float(values.max()) if values.size and values.max() > 0 else 1.0
    edges = np.linspace(0.0, top, bins + 1)
    counts, densities = {}, {}
    for cls in sorted({str(key(r)) for r in records}):
        sel = np.array([str(key(r)) == cls for r in records])
        c, _ = np.histogram(values[sel], bins=edges)
        counts[cls] = c
        densities[cls] = c / c.sum() if c.sum() else c.astype(np.float64)
    return DavHistogram(edges, counts, densities)


def write_dav_csv(path, records: Iterable[DavRecord], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["image_id", "dav", "label"])
        for r in records:
            w.writerow([r.image_id, repr(float(r.dav)), r.label or ""])


def read_dav_csv(path) -> list[DavRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [DavRecord(row["image_id"], float(row["dav"]), row.get("label") or None) for row in reader]


def write_histogram_csv(path, hist: DavHistogram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "class", "count", "density"])
        for row in hist.rows():
            w.writerow([repr(row[0]), repr(row[1]), row[2], row[3], repr(row[4])])


def write_thresholds(path, clf: ThresholdClassifier) -> None:
    Path(path).write_text(f"{clf.c1!r},{clf.c2!r}\n")


def read_thresholds(path) -> ThresholdClassifier:
    text = Path(path).read_text().strip()
    try:
        c1, c2 = (float(x) for x in text.split(","))
    except ValueError as e:
        raise ValueError(f"{path}: expected 'c1,c2', got {text!r}") from e
    return ThresholdClassifier(c1, c2)
