"""Performance metrics: accuracy, ROC/AUC, APCER/BPCER and post-mortem time analysis.

Live is the positive class throughout and the liveness score is ``p_live``.
A sample is accepted as live when ``p_live >= threshold``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Label
from .errors import LoadError, ParameterError, ValidationError
from .quality import BoxplotStats, boxplot_stats

SCHEMA_VERSION = 1
DECISION_THRESHOLD = 0.5
SCORE_COLUMNS = ("split_index", "sample_id", "image_path", "subject_id", "true_label", "hours_post_mortem", "p_live")


@dataclass(frozen=True)
class ScoredSample:
    p_live: float
    true_label: Label
    hours_post_mortem: float = 0.0
    subject_id: str = ""
    split_index: int = 0
    sample_id: str = ""
    image_path: str = ""

    def __post_init__(self):
        if not 0.0 <= self.p_live <= 1.0:
            raise ValidationError(f"p_live must lie in [0, 1], got {self.p_live}")


@dataclass(frozen=True)
class RocPoint:
    false_live_rate: float
    true_live_rate: float
    threshold: float


@dataclass
class OperatingPoint:
    threshold: float
    apcer: float
    bpcer: float
    min_hours: float = 0.0
    # AUC over the same filtered sample set.
    auc: float | None = None


@dataclass
class TimeBin:
    label: str
    hours_low: float
    hours_high: float | None
    n: int
    box: BoxplotStats
    mean: float | None
    std: float | None


@dataclass
class EvalReport:
    per_split_accuracy: list[float]
    mean_accuracy: float
    roc_points: list[RocPoint]
    auc: float
    apcer: float
    bpcer: float
    operating_threshold: float
    time_bins: list[TimeBin] = field(default_factory=list)
    per_split_auc: list[float] = field(default_factory=list)
    zero_apcer: list[OperatingPoint] = field(default_factory=list)
    scored: list[ScoredSample] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_samples": len(self.scored),
            "per_split_accuracy": self.per_split_accuracy,
            "mean_accuracy": self.mean_accuracy,
            "per_split_auc": self.per_split_auc,
            "auc": self.auc,
            "operating_threshold": self.operating_threshold,
            "apcer": self.apcer,
            "bpcer": self.bpcer,
            "zero_apcer": [asdict(p) for p in self.zero_apcer],
            "roc_points": [asdict(p) for p in self.roc_points],
            "time_bins": [asdict(b) for b in self.time_bins],
        }


def _split_by_class(scored) -> tuple[np.ndarray, np.ndarray]:
    live = np.array([s.p_live for s in scored if s.true_label is Label.LIVE], dtype=np.float64)
    pm = np.array([s.p_live for s in scored if s.true_label is Label.POST_MORTEM], dtype=np.float64)
    return live, pm


def split_accuracy(scored) -> float:
    """Share of samples whose 0.5-threshold label matches the truth."""
    scored = list(scored)
    if not scored:
        raise ParameterError("no scored samples")
    correct = sum((s.p_live >= DECISION_THRESHOLD) == (s.true_label is Label.LIVE) for s in scored)
    return correct / len(scored)


def roc_auc(scored) -> tuple[list[RocPoint], float]:
    """ROC over every distinct score, swept from the top; AUC by the trapezoid rule."""
    live, pm = _split_by_class(scored)
    if live.size == 0 or pm.size == 0:
        raise ParameterError("ROC is undefined unless both classes are present")

    thresholds = np.unique(np.concatenate([live, pm]))[::-1]
    live_sorted = np.sort(live)
    pm_sorted = np.sort(pm)
    # Number of scores >= t, via searchsorted on the ascending arrays.
    tl = (live.size - np.searchsorted(live_sorted, thresholds, side="left")) / live.size
    fl = (pm.size - np.searchsorted(pm_sorted, thresholds, side="left")) / pm.size

    points = [RocPoint(0.0, 0.0, math.nextafter(float(thresholds[0]), math.inf))]
    points += [RocPoint(float(f), float(t), float(th)) for f, t, th in zip(fl, tl, thresholds)]

    x = np.array([p.false_live_rate for p in points])
    y = np.array([p.true_live_rate for p in points])
    auc = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return points, min(max(auc, 0.0), 1.0)


def apcer_bpcer(scored, threshold: float) -> tuple[float, float]:
    live, pm = _split_by_class(scored)
    if live.size == 0 or pm.size == 0:
        raise ParameterError("APCER/BPCER need both live and post-mortem samples")
    apcer = float(np.count_nonzero(pm >= threshold)) / pm.size
    bpcer = float(np.count_nonzero(live < threshold)) / live.size
    return apcer, bpcer


def zero_apcer_operating_point(scored, min_hours: float = 0.0) -> OperatingPoint:
    """Lowest threshold that rejects every post-mortem sample with ``hours >= min_hours``."""
    kept = [s for s in scored if s.true_label is Label.LIVE or s.hours_post_mortem >= min_hours]
    live, pm = _split_by_class(kept)
    if pm.size == 0:
        raise ParameterError(f"no post-mortem samples with hours_post_mortem >= {min_hours}")
    if live.size == 0:
        raise ParameterError("no live samples")
    threshold = math.nextafter(float(pm.max()), math.inf)
    apcer, bpcer = apcer_bpcer(kept, threshold)
    _, auc = roc_auc(kept)
    return OperatingPoint(threshold=threshold, apcer=apcer, bpcer=bpcer, min_hours=min_hours, auc=auc)


def _time_bin(label, low, high, scores) -> TimeBin:
    v = np.asarray(scores, dtype=np.float64)
    return TimeBin(
        label=label,
        hours_low=low,
        hours_high=high,
        n=int(v.size),
        box=boxplot_stats(v),
        mean=float(v.mean()) if v.size else None,
        std=float(v.std()) if v.size else None,
    )


def time_horizon_analysis(scored, bin_edges=None) -> list[TimeBin]:
    """Liveness-score statistics per time-since-death bin.

    Live samples form the ``0 h`` bin. With ``bin_edges = [e1, ..., ek]``
    (increasing, positive) post-mortem samples fall into ``(0, e1)``,
    ``[e1, e2)``, ..., ``[ek, inf)``. Without edges every distinct
    acquisition time gets its own bin. Empty bins are kept with ``n = 0``.
    """
    scored = list(scored)
    if not scored:
        raise ParameterError("no scored samples")
    live = [s.p_live for s in scored if s.true_label is Label.LIVE]
    pm = [s for s in scored if s.true_label is Label.POST_MORTEM]
    bins = [_time_bin("0h", 0.0, 0.0, live)]

    if bin_edges is None:
        for h in sorted({s.hours_post_mortem for s in pm}):
            bins.append(_time_bin(f"{h:g}h", h, h, [s.p_live for s in pm if s.hours_post_mortem == h]))
        return bins

    edges = [float(e) for e in bin_edges]
    if any(e <= 0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ParameterError(f"bin edges must be positive and strictly increasing, got {edges}")
    lows = [0.0] + edges
    highs = edges + [None]
    for low, high in zip(lows, highs):
        members = [s.p_live for s in pm if s.hours_post_mortem >= low and (high is None or s.hours_post_mortem < high)]
        name = f"[{low:g},{high:g})h" if high is not None else f">={low:g}h"
        if low == 0.0:
            name = f"(0,{high:g})h" if high is not None else ">0h"
        bins.append(_time_bin(name, low, high, members))
    return bins


def evaluate_split(scored, bin_edges=None, min_hours=(0.0,)) -> EvalReport:
    scored = list(scored)
    points, auc = roc_auc(scored)
    apcer, bpcer = apcer_bpcer(scored, DECISION_THRESHOLD)
    acc = split_accuracy(scored)
    return EvalReport(
        per_split_accuracy=[acc],
        mean_accuracy=acc,
        roc_points=points,
        auc=auc,
        apcer=apcer,
        bpcer=bpcer,
        operating_threshold=DECISION_THRESHOLD,
        time_bins=time_horizon_analysis(scored, bin_edges),
        per_split_auc=[auc],
        zero_apcer=_zero_apcer_points(scored, min_hours),
        scored=scored,
    )


def _zero_apcer_points(scored, min_hours) -> list[OperatingPoint]:
    out = []
    for h in min_hours:
        try:
            out.append(zero_apcer_operating_point(scored, h))
        except ParameterError:
            continue
    return out


def aggregate_splits(reports, bin_edges=None, min_hours=(0.0,)) -> EvalReport:
    """Mean of per-split accuracies plus metrics over the pooled scores of all splits."""
    reports = list(reports)
    if not reports:
        raise ParameterError("need at least one split report")
    pooled = [s for r in reports for s in r.scored]
    accs = [a for r in reports for a in r.per_split_accuracy]
    aucs = [a for r in reports for a in r.per_split_auc]
    points, auc = roc_auc(pooled)
    apcer, bpcer = apcer_bpcer(pooled, DECISION_THRESHOLD)
    return EvalReport(
        per_split_accuracy=accs,
        mean_accuracy=float(np.mean(accs)),
        roc_points=points,
        auc=auc,
        apcer=apcer,
        bpcer=bpcer,
        operating_threshold=DECISION_THRESHOLD,
        time_bins=time_horizon_analysis(pooled, bin_edges),
        per_split_auc=aucs,
        zero_apcer=_zero_apcer_points(pooled, min_hours),
        scored=pooled,
    )


def write_scores(scored, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for s in scored:
            w.writerow([s.split_index, s.sample_id, s.image_path, s.subject_id, s.true_label.value,
                        repr(float(s.hours_post_mortem)), repr(float(s.p_live))])
    return path


def read_scores(path: str | os.PathLike) -> list[ScoredSample]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"score file not found: {path}")
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_COLUMNS:
            raise ValidationError(f"{path}: unexpected header {reader.fieldnames}")
        for i, row in enumerate(reader, start=1):
            try:
                out.append(ScoredSample(
                    p_live=float(row["p_live"]),
                    true_label=Label(row["true_label"]),
                    hours_post_mortem=float(row["hours_post_mortem"]),
                    subject_id=row["subject_id"],
                    split_index=int(row["split_index"]),
                    sample_id=row["sample_id"],
                    image_path=row["image_path"],
                ))
            except ValueError as exc:
                raise ValidationError(f"{path}: {exc}", row=i) from None
    return out
