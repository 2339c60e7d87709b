"""Alignment (Dice, TRE) and regularity (folding ratio, stdLogJ) metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import GridError, LabelGrid, LandmarkSet, VectorFieldGrid, sample_array, warp_labels
from .transforms import jacobian_determinant

LOG_JDET_EPS = 1e-6

CSV_COLUMNS = (
    "dice_mean", "tre_mean_mm", "tre_p95_mm", "folding_ratio_pct", "std_log_j", "clamped_jdet_count",
)


@dataclass(frozen=True)
class MetricReport:
    folding_ratio_pct: float
    std_log_j: float
    clamped_jdet_count: int
    dice_per_label: dict[int, float] = field(default_factory=dict)
    dice_mean: float | None = None
    tre_mean_mm: float | None = None
    tre_p95_mm: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dice_per_label"] = {str(k): v for k, v in sorted(self.dice_per_label.items())}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        data = dict(data)
        data["dice_per_label"] = {int(k): float(v) for k, v in data.get("dice_per_label", {}).items()}
        return cls(**data)

    def csv_row(self) -> list:
        return ["" if getattr(self, c) is None else getattr(self, c) for c in CSV_COLUMNS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerow(self.csv_row())
        return buf.getvalue()


def dice(fixed_labels: LabelGrid, warped_labels: LabelGrid) -> tuple[dict[int, float], float | None]:
    """Per-label Dice over foreground labels and their mean.

    Labels absent from both grids are skipped; a label present in only one
    grid scores 0.
    """
    a, b = np.asarray(fixed_labels.data), np.asarray(warped_labels.data)
    if a.shape != b.shape:
        raise GridError(f"dice: dims mismatch {a.shape} vs {b.shape}")
    present = sorted(set(np.unique(a).tolist()) | set(np.unique(b).tolist()))
    na = np.bincount(a.ravel(), minlength=max(present) + 1)
    nb = np.bincount(b.ravel(), minlength=max(present) + 1)
    overlap = np.bincount(a.ravel()[a.ravel() == b.ravel()], minlength=max(present) + 1)
    scores = {}
    for lab in present:
        if lab == 0:
            continue
        denom = na[lab] + nb[lab]
        scores[int(lab)] = float(2.0 * overlap[lab] / denom)
    mean = float(np.mean(list(scores.values()))) if scores else None
    return scores, mean


def tre(fixed_lms: LandmarkSet, moving_lms: LandmarkSet, disp: VectorFieldGrid, spacing) -> tuple[float, float]:
    """Mean and 95th percentile landmark error in mm.

    ``disp`` maps fixed-grid coordinates into moving space, so the mapped
    fixed landmark ``p + disp(p)`` is compared to its moving counterpart.
    """
    if fixed_lms.ids != moving_lms.ids:
        unmatched = sorted(set(fixed_lms.ids) ^ set(moving_lms.ids))
        if not unmatched:
            raise GridError("landmark ids are not in the same order")
        raise GridError(f"unmatched landmark ids: {', '.join(unmatched)}")
    if len(fixed_lms) == 0:
        raise GridError("no landmarks")
    pts = fixed_lms.points
    mapped = pts + sample_array(disp.data, pts)
    err = (mapped - moving_lms.points) * np.asarray(spacing, dtype=np.float64)
    dist = np.sqrt((err ** 2).sum(axis=1))
    return float(dist.mean()), float(np.percentile(dist, 95))


def folding_ratio(jdet) -> float:
    """Percentage of voxels with a non-positive Jacobian determinant."""
    jdet = np.asarray(jdet)
    if jdet.size == 0:
        raise ValueError("empty Jacobian field")
    return 100.0 * int(np.count_nonzero(jdet <= 0)) / jdet.size


def std_log_jacobian(jdet) -> tuple[float, int]:
    """Population std of ``log(max(jdet, 1e-6))`` and the number of clamped voxels."""
    jdet = np.asarray(jdet, dtype=np.float64)
    if jdet.size == 0:
        raise ValueError("empty Jacobian field")
    clamped = int(np.count_nonzero(jdet < LOG_JDET_EPS))
    return float(np.std(np.log(np.maximum(jdet, LOG_JDET_EPS)))), clamped


def evaluate(disp: VectorFieldGrid, fixed_labels: LabelGrid | None = None,
             moving_labels: LabelGrid | None = None, fixed_landmarks: LandmarkSet | None = None,
             moving_landmarks: LandmarkSet | None = None, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    """All metrics a pair supports; Dice needs both label grids, TRE both landmark sets."""
    jdet = jacobian_determinant(disp)
    sd, clamped = std_log_jacobian(jdet)
    report = dict(folding_ratio_pct=folding_ratio(jdet), std_log_j=sd, clamped_jdet_count=clamped)
    if fixed_labels is not None and moving_labels is not None:
        per, mean = dice(fixed_labels, warp_labels(moving_labels, disp))
        report.update(dice_per_label=per, dice_mean=mean)
    if fixed_landmarks is not None and moving_landmarks is not None:
        report["tre_mean_mm"], report["tre_p95_mm"] = tre(fixed_landmarks, moving_landmarks, disp, spacing)
    return MetricReport(**report)
