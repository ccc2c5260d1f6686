"""SELD scoring: location-dependent F1 at 20 degrees, DOA error, and
relative distance error.

Predictions and references are matched per (frame, class) cell by minimum
total angular error (Hungarian assignment).  A matched pair is a true
positive only when its angular error is within the threshold; matched pairs
beyond the threshold count as one false positive plus one false negative.
DOAE and RDE average over every matched pair regardless of threshold and
are reported as NaN when nothing matched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment

from .codec import Event, sort_events, wrap_azimuth_deg

ANGLE_THRESHOLD_DEG = 20.0


@dataclass
class MatchedPair:
    pred: Event
    ref: Event
    angular_error_deg: float
    distance_error_m: float


@dataclass
class MatchResult:
    pairs: list[MatchedPair]
    unmatched_pred: list[Event]
    unmatched_ref: list[Event]


@dataclass
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    angular_errors: list[float] = field(default_factory=list)
    relative_distance_errors: list[float] = field(default_factory=list)

    @property
    def f20(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass
class MetricsReport:
    f20: float
    doae_deg: float  # NaN when no matched pairs
    rde: float  # NaN when no matched pairs
    tp: int
    fp: int
    fn: int
    n_matched: int
    per_class: dict[int, ClassScore]


def angular_error_deg(az_a: float, az_b: float) -> float:
    """Great-circle distance on the azimuth circle: min(|d|, 360 - |d|)."""
    return abs((az_a - az_b + 180.0) % 360.0 - 180.0)


def fold_frontback_deg(az: float) -> float:
    """Map azimuth onto [-90, 90], identifying mirror-image directions a
    two-capsule array cannot distinguish."""
    az = wrap_azimuth_deg(az)
    if az > 90.0:
        return 180.0 - az
    if az < -90.0:
        return -180.0 - az
    return az


def match_events(pred: list[Event], ref: list[Event]) -> MatchResult:
    """Optimal per-(frame, class) assignment minimizing total angular error."""
    cells: dict[tuple[int, int], tuple[list[Event], list[Event]]] = {}
    for e in pred:
        cells.setdefault((e.frame, e.class_id), ([], []))[0].append(e)
    for e in ref:
        cells.setdefault((e.frame, e.class_id), ([], []))[1].append(e)
    pairs: list[MatchedPair] = []
    unmatched_pred: list[Event] = []
    unmatched_ref: list[Event] = []
    for key in sorted(cells):
        cell_pred, cell_ref = cells[key]
        if not cell_pred or not cell_ref:
            unmatched_pred.extend(cell_pred)
            unmatched_ref.extend(cell_ref)
            continue
        cell_pred = sort_events(cell_pred)
        cell_ref = sort_events(cell_ref)
        cost = np.array([
            [angular_error_deg(p.azimuth_deg, r.azimuth_deg) for r in cell_ref]
            for p in cell_pred
        ])
        rows, cols = linear_sum_assignment(cost)
        taken_pred, taken_ref = set(rows), set(cols)
        for i, j in zip(rows, cols):
            p, r = cell_pred[i], cell_ref[j]
            pairs.append(MatchedPair(
                pred=p, ref=r,
                angular_error_deg=float(cost[i, j]),
                distance_error_m=abs(p.distance_m - r.distance_m),
            ))
        unmatched_pred.extend(e for i, e in enumerate(cell_pred) if i not in taken_pred)
        unmatched_ref.extend(e for j, e in enumerate(cell_ref) if j not in taken_ref)
    return MatchResult(pairs=pairs, unmatched_pred=unmatched_pred, unmatched_ref=unmatched_ref)


def score(
    pred: list[Event],
    ref: list[Event],
    angle_threshold_deg: float = ANGLE_THRESHOLD_DEG,
    fold_frontback: bool = False,
) -> MetricsReport:
    """Aggregate detection and localization metrics over event lists."""
    if fold_frontback:
        pred = [replace(e, azimuth_deg=fold_frontback_deg(e.azimuth_deg)) for e in pred]
        ref = [replace(e, azimuth_deg=fold_frontback_deg(e.azimuth_deg)) for e in ref]
    match = match_events(pred, ref)
    per_class: dict[int, ClassScore] = {}

    def cls(c: int) -> ClassScore:
        return per_class.setdefault(c, ClassScore())

    for pair in match.pairs:
        entry = cls(pair.ref.class_id)
        entry.angular_errors.append(pair.angular_error_deg)
        entry.relative_distance_errors.append(pair.distance_error_m / pair.ref.distance_m)
        if pair.angular_error_deg <= angle_threshold_deg:
            entry.tp += 1
        else:
            entry.fp += 1
            entry.fn += 1
    for e in match.unmatched_pred:
        cls(e.class_id).fp += 1
    for e in match.unmatched_ref:
        cls(e.class_id).fn += 1

    tp = sum(s.tp for s in per_class.values())
    fp = sum(s.fp for s in per_class.values())
    fn = sum(s.fn for s in per_class.values())
    all_ang = [err for s in per_class.values() for err in s.angular_errors]
    all_rde = [err for s in per_class.values() for err in s.relative_distance_errors]
    denom = 2 * tp + fp + fn
    return MetricsReport(
        f20=2 * tp / denom if denom else 0.0,
        doae_deg=float(np.mean(all_ang)) if all_ang else math.nan,
        rde=float(np.mean(all_rde)) if all_rde else math.nan,
        tp=tp, fp=fp, fn=fn,
        n_matched=len(match.pairs),
        per_class=per_class,
    )


def acs_transform_labels(events: list[Event]) -> list[Event]:
    """Label companion of swapping L/R audio: azimuth negates, rest fixed."""
    return sort_events([
        replace(e, azimuth_deg=wrap_azimuth_deg(-e.azimuth_deg)) for e in events
    ])


def report_lines(report: MetricsReport) -> list[str]:
    """Flat key=value rendering used by the CLI."""
    lines = [
        f"f20={report.f20:.6f}",
        f"doae_deg={report.doae_deg:.6f}",
        f"rde={report.rde:.6f}",
        f"tp={report.tp}",
        f"fp={report.fp}",
        f"fn={report.fn}",
        f"n_matched={report.n_matched}",
    ]
    return lines


def per_class_rows(report: MetricsReport) -> list[dict]:
    """Per-class breakdown for the optional CSV report."""
    rows = []
    for class_id in sorted(report.per_class):
        s = report.per_class[class_id]
        rows.append({
            "class": class_id,
            "tp": s.tp,
            "fp": s.fp,
            "fn": s.fn,
            "f20": s.f20,
            "doae_deg": float(np.mean(s.angular_errors)) if s.angular_errors else math.nan,
            "rde": float(np.mean(s.relative_distance_errors))
                   if s.relative_distance_errors else math.nan,
        })
    return rows


def write_per_class_csv(path: str, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("class,tp,fp,fn,f20,doae_deg,rde\n")
        for row in per_class_rows(report):
            fh.write(
                f"{row['class']},{row['tp']},{row['fp']},{row['fn']},"
                f"{row['f20']:.6f},{row['doae_deg']:.6f},{row['rde']:.6f}\n"
            )
