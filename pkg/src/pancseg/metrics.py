"""Volume overlap metrics and Table-1 style summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import DataError, DimensionMismatchError, EmptyGroundTruthError

METRICS = ("dice", "jaccard", "precision", "recall")


@dataclass(frozen=True)
class OverlapReport:
    dice: float
    jaccard: float
    precision: float
    recall: float
    n_pred: int
    n_gt: int
    n_intersection: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "OverlapReport":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__})


def overlap_report(pred, gt) -> OverlapReport:
    """Dice, Jaccard, precision and recall of ``pred`` (A) against ``gt`` (B).

    An empty prediction scores 0 on every metric.
    """
    a = np.asarray(getattr(pred, "data", pred), dtype=bool)
    b = np.asarray(getattr(gt, "data", gt), dtype=bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    n_b = int(np.count_nonzero(b))
    if n_b == 0:
        raise EmptyGroundTruthError("ground-truth mask is empty")
    n_a = int(np.count_nonzero(a))
    n_ab = int(np.count_nonzero(a & b))
    union = n_a + n_b - n_ab
    return OverlapReport(
        dice=2.0 * n_ab / (n_a + n_b),
        jaccard=n_ab / union,
        precision=n_ab / n_a if n_a else 0.0,
        recall=n_ab / n_b,
        n_pred=n_a,
        n_gt=n_b,
        n_intersection=n_ab,
    )


def summarize(reports: Sequence[OverlapReport]) -> Dict[str, Dict[str, float]]:
    """Per-metric mean, population std, min and max."""
    if not reports:
        raise DataError("cannot summarize an empty list of reports")
    out = {}
    for name in METRICS:
        v = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max())}
    return out


def write_summary_csv(path, summary: Dict[str, Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "min", "max"])
        for name in METRICS:
            s = summary[name]
            w.writerow([name, repr(s["mean"]), repr(s["std"]), repr(s["min"]), repr(s["max"])])


def format_table_row(summary: Dict[str, Dict[str, float]]) -> str:
    """``68.8%±25.6 [0 96.6]`` style cells for each metric."""
    cells = []
    for name in METRICS:
        s = summary[name]
        cells.append(f"{name}: {100 * s['mean']:.1f}%±{100 * s['std']:.1f} [{100 * s['min']:.1f} {100 * s['max']:.1f}]")
    return "  ".join(cells)


def load_reports(directory) -> List[OverlapReport]:
    paths = sorted(Path(directory).glob("*.json"))
    return [OverlapReport.from_dict(json.loads(p.read_text())) for p in paths]
