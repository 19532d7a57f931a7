"""Ranking metrics: per-class average precision, mAP and top-k accuracy."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("ratio", "method", "seed", "map", "top1", "wall_time_s", "config_hash")


def average_precision(scores, labels) -> float | None:
    """Mean of the precision at the rank of each positive, or ``None`` without positives.

    Ranks come from a stable descending sort, so tied scores keep their
    original order. The sum is accumulated exactly and rounded once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hit_ranks = np.flatnonzero(labels[order]) + 1
    total = sum((Fraction(i, int(r)) for i, r in enumerate(hit_ranks, start=1)), Fraction(0))
    return float(total / n_pos)


def top_k_accuracy(scores, true_class, k: int) -> float:
    """Fraction of rows whose true class is among the ``k`` highest scores (ties to lower index)."""
    scores = np.asarray(scores, dtype=np.float64)
    true_class = np.asarray(true_class, dtype=np.int64)
    n, num_classes = scores.shape
    if k < 1 or k > num_classes:
        raise ValueError(f"k must lie in [1, {num_classes}], got {k}")
    if true_class.shape != (n,):
        raise ValueError(f"true_class must have shape ({n},), got {true_class.shape}")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == true_class[:, None], axis=1)))


@dataclass
class MetricsReport:
    per_class_ap: list[float | None]
    map: float
    top1: float | None = None
    top5: float | None = None
    n_eval: int = 0
    seed: int = 0
    method: str = ""
    config_hash: str = ""
    wall_time_s: float | None = None
    skipped_classes: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> MetricsReport:
        return cls(**json.loads(Path(path).read_text()))


def mean_average_precision(all_scores, all_labels, top_k: tuple[int, ...] = ()) -> MetricsReport:
    """Per-class AP over the rows of an ``[N, K]`` score matrix; classes with no positives are skipped.

    When ``top_k`` is given and every row has exactly one positive, top-1/top-5
    accuracies are filled in as well.
    """
    scores = np.asarray(all_scores, dtype=np.float64)
    labels = np.asarray(all_labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal [N, K] arrays")
    if scores.shape[0] < 1:
        raise ValueError("need at least one example")
    per_class = [average_precision(scores[:, k], labels[:, k]) for k in range(scores.shape[1])]
    present = [ap for ap in per_class if ap is not None]
    if not present:
        raise ValueError("no class has a positive label; mAP is undefined")
    report = MetricsReport(
        per_class_ap=per_class,
        map=float(np.mean(present)),
        n_eval=int(scores.shape[0]),
        skipped_classes=[k for k, ap in enumerate(per_class) if ap is None],
    )
    if top_k and np.all(np.count_nonzero(labels, axis=1) == 1):
        true_class = np.argmax(labels, axis=1)
        if 1 in top_k:
            report.top1 = top_k_accuracy(scores, true_class, 1)
        if 5 in top_k and scores.shape[1] >= 5:
            report.top5 = top_k_accuracy(scores, true_class, 5)
    return report


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def reports_to_csv(rows: list[dict]) -> str:
    """Render rows keyed by :data:`CSV_COLUMNS` to CSV text with ``\\n`` line endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()
