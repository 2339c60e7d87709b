"""Alignment-regularity characteristic (ARC) curves.

A sweep registers every test pair at several regularization weights. The
resulting records are aggregated per weight (mean and population std over
pairs) and the points are ordered by the regularity metric, never by the
weight. Curves can then be sliced at fixed regularity levels to compare
methods.
"""
from __future__ import annotations

import bisect
import csv
import enum
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import ImageGrid, LabelGrid, LandmarkSet
from .io import read_grid, read_json, read_landmarks
from .metrics import MetricReport, evaluate
from .objective import diffusion_energy
from .optimizer import RegistrationConfig, RegistrationDiverged, register, warm_config
from .transforms import ModelKind

SCHEMA = "arc/1"
LAMBDA_FLOOR = 1e-4
MIN_COMPLETION = 0.9
WARM_FRACTION = 0.25
RECORD_COLUMNS = ("method", "pair_id", "lambda", "dice_mean", "tre_mean_mm", "folding_pct",
                  "std_log_j", "converged", "warm_start")


class SweepError(RuntimeError):
    pass


class AlignMetric(str, enum.Enum):
    DICE = "dice"
    TRE = "tre"

    @property
    def attr(self) -> str:
        return "dice_mean" if self is AlignMetric.DICE else "tre_mean_mm"

    @property
    def higher_is_better(self) -> bool:
        return self is AlignMetric.DICE

    @property
    def title(self) -> str:
        return "Dice (mean)" if self is AlignMetric.DICE else "TRE (mm)"


class RegulMetric(str, enum.Enum):
    FOLDING = "folding"
    STDLOGJ = "stdlogj"

    @property
    def attr(self) -> str:
        return "folding_ratio_pct" if self is RegulMetric.FOLDING else "std_log_j"

    @property
    def title(self) -> str:
        return "Folding ratio (%)" if self is RegulMetric.FOLDING else "stdLogJ"


@dataclass(frozen=True)
class Axes:
    alignment: AlignMetric = AlignMetric.DICE
    regularity: RegulMetric = RegulMetric.FOLDING

    def __post_init__(self):
        object.__setattr__(self, "alignment", AlignMetric(self.alignment))
        object.__setattr__(self, "regularity", RegulMetric(self.regularity))


@dataclass(frozen=True, eq=False)
class RegPair:
    pair_id: str
    moving: ImageGrid
    fixed: ImageGrid
    moving_labels: LabelGrid | None = None
    fixed_labels: LabelGrid | None = None
    fixed_landmarks: LandmarkSet | None = None
    moving_landmarks: LandmarkSet | None = None


def load_manifest(path) -> list[RegPair]:
    """Load every pair listed in a dataset manifest (paths relative to the manifest)."""
    path = Path(path)
    entries = read_json(path)
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"{path}: manifest must be a non-empty list of pairs")
    root = path.parent
    pairs = []
    for entry in entries:
        def opt(key, reader):
            return reader(root / entry[key]) if entry.get(key) else None
        pairs.append(RegPair(
            pair_id=str(entry["pair_id"]),
            moving=read_grid(root / entry["moving"]),
            fixed=read_grid(root / entry["fixed"]),
            moving_labels=opt("moving_labels", read_grid),
            fixed_labels=opt("fixed_labels", read_grid),
            fixed_landmarks=opt("fixed_landmarks", read_landmarks),
            moving_landmarks=opt("moving_landmarks", read_landmarks),
        ))
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate pair ids")
    return pairs


@dataclass(frozen=True, eq=False)
class ArcRecord:
    pair_id: str
    lam: float
    method: str
    metrics: MetricReport | None
    run: dict | None = None
    warm_start: bool = False
    failed: bool = False
    error: str | None = None
    converged: bool = False
    regularizer_energy: float | None = None
    wall_time_ms: float = 0.0

    def value(self, attr: str) -> float | None:
        return None if self.metrics is None else getattr(self.metrics, attr)

    def to_dict(self, run_ref: str | None = None) -> dict:
        """JSON form; timing is left out so reruns are byte-identical."""
        out = {
            "schema": SCHEMA,
            "pair_id": self.pair_id,
            "lambda": self.lam,
            "method": self.method,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "warm_start": self.warm_start,
            "failed": self.failed,
            "error": self.error,
            "converged": self.converged,
            "regularizer_energy": self.regularizer_energy,
        }
        if run_ref is not None:
            out["run"] = run_ref
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ArcRecord":
        if data.get("schema") != SCHEMA:
            raise ValueError(f"unsupported record schema {data.get('schema')!r}")
        metrics = data.get("metrics")
        return cls(
            pair_id=data["pair_id"], lam=float(data["lambda"]), method=data.get("method", ""),
            metrics=None if metrics is None else MetricReport.from_dict(metrics),
            run=None, warm_start=bool(data.get("warm_start", False)),
            failed=bool(data.get("failed", False)), error=data.get("error"),
            converged=bool(data.get("converged", False)),
            regularizer_energy=data.get("regularizer_energy"),
        )

    def csv_row(self) -> list:
        m = self.metrics

        def cell(v):
            return "" if v is None else repr(float(v))
        return [
            self.method, self.pair_id, repr(self.lam),
            cell(m and m.dice_mean), cell(m and m.tre_mean_mm),
            cell(m and m.folding_ratio_pct), cell(m and m.std_log_j),
            str(self.converged).lower(), str(self.warm_start).lower(),
        ]


def records_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for rec in records:
        writer.writerow(rec.csv_row())
    return buf.getvalue()


def default_method(config: RegistrationConfig) -> str:
    return f"{config.model_kind.value}-{config.dissim.value}"


def pair_metrics(pair: RegPair, disp) -> MetricReport:
    return evaluate(disp, pair.fixed_labels, pair.moving_labels, pair.fixed_landmarks,
                    pair.moving_landmarks, pair.fixed.spacing)


def _record_from_result(pair, lam, method, result, warm) -> ArcRecord:
    reg_field = result.params.raw if result.params.kind is ModelKind.SVF else result.realized.data
    return ArcRecord(
        pair_id=pair.pair_id, lam=lam, method=method, metrics=pair_metrics(pair, result.realized),
        run=result.run_record(), warm_start=warm, converged=result.converged,
        regularizer_energy=diffusion_energy(reg_field), wall_time_ms=result.wall_time_ms,
    )


def _failed_record(pair, lam, method, exc, warm) -> ArcRecord:
    run = None
    if isinstance(exc, RegistrationDiverged):
        run = {"energy_trace": [e.to_dict() for e in exc.trace]}
    return ArcRecord(pair.pair_id, lam, method, None, run=run, warm_start=warm,
                     failed=True, error=f"{type(exc).__name__}: {exc}")


def _run_cell(args) -> ArcRecord:
    pair, lam, config, method = args
    try:
        result = register(pair.moving, pair.fixed, replace(config, lam=lam))
    except (RegistrationDiverged, FloatingPointError, ValueError) as exc:
        return _failed_record(pair, lam, method, exc, False)
    return _record_from_result(pair, lam, method, result, False)


def _run_chain(args) -> list[ArcRecord]:
    pair, lambdas, config, method = args
    out = []
    prev = None
    for lam in lambdas:
        try:
            if prev is None:
                result = register(pair.moving, pair.fixed, replace(config, lam=lam))
            else:
                result = register(pair.moving, pair.fixed,
                                  warm_config(replace(config, lam=lam), WARM_FRACTION), init=prev)
        except (RegistrationDiverged, FloatingPointError, ValueError) as exc:
            out.append(_failed_record(pair, lam, method, exc, prev is not None))
            continue
        out.append(_record_from_result(pair, lam, method, result, prev is not None))
        prev = result.params
    return out


def _map(fn, tasks, jobs):
    jobs = resolve_jobs(jobs)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def resolve_jobs(jobs=None) -> int:
    if jobs is None:
        env = os.environ.get("ARC_REG_JOBS")
        jobs = int(env) if env else (os.cpu_count() or 1)
    if int(jobs) < 1:
        raise ValueError("jobs must be >= 1")
    return int(jobs)


def _check_completion(records):
    failed = [r for r in records if r.failed]
    if records and (len(records) - len(failed)) / len(records) < MIN_COMPLETION:
        cells = ", ".join(f"{r.pair_id}@{r.lam!r}" for r in failed)
        raise SweepError(f"{len(failed)}/{len(records)} cells failed: {cells}")


def _validate_lambdas(lambdas):
    lambdas = [float(x) for x in lambdas]
    if not lambdas:
        raise ValueError("empty lambda list")
    if any(not math.isfinite(x) or x < 0 for x in lambdas):
        raise ValueError("lambda must be ≥ 0")
    if len(set(lambdas)) != len(lambdas):
        raise ValueError("duplicate lambda")
    return lambdas


def sweep(dataset, lambdas, config: RegistrationConfig, jobs=1, method: str | None = None) -> list[ArcRecord]:
    """Cold-start registration of every (pair, lambda) cell, pair-major order."""
    if not dataset:
        raise ValueError("empty dataset")
    lambdas = _validate_lambdas(lambdas)
    method = method or default_method(config)
    tasks = [(pair, lam, config, method) for pair in dataset for lam in lambdas]
    records = _map(_run_cell, tasks, jobs)
    _check_completion(records)
    return records


def continuation_lambdas(lambda_min: float, lambda_max: float, n_points: int, anchors=()) -> list[float]:
    """Ascending lambda grid: log-spaced over ``[max(lambda_min, 1e-4), lambda_max]``.

    ``0`` is prepended when ``lambda_min == 0``. ``anchors`` inside the range
    are merged in and the log-spaced part shrinks so the grid keeps
    ``n_points`` entries.
    """
    if not (0 <= lambda_min < lambda_max) or not math.isfinite(lambda_max):
        raise ValueError("need 0 <= lambda_min < lambda_max")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    lo = max(float(lambda_min), LAMBDA_FLOOR)
    hi = float(lambda_max)
    if lo >= hi:
        raise ValueError(f"lambda_max must exceed {LAMBDA_FLOOR}")
    fixed = {lo, hi}
    if lambda_min == 0:
        fixed.add(0.0)
    fixed.update(float(a) for a in anchors if lambda_min <= float(a) <= hi)
    n_log = n_points - len(fixed) + 2
    if n_log < 2:
        raise ValueError(f"n_points={n_points} too small for {len(fixed)} required values")
    grid = set(float(x) for x in np.logspace(math.log10(lo), math.log10(hi), n_log))
    # logspace endpoints may differ from lo/hi in the last ulp
    grid = {x for x in grid if not math.isclose(x, lo, rel_tol=1e-12) and not math.isclose(x, hi, rel_tol=1e-12)}
    return sorted(grid | fixed)


def continuation_sweep(dataset, lambda_min: float, lambda_max: float, n_points: int,
                       config: RegistrationConfig, anchors=(), jobs=1,
                       method: str | None = None) -> list[ArcRecord]:
    """Dense lambda sweep where each solve starts from the previous lambda's solution.

    The first lambda of each pair is solved cold with ``config``; every later
    one runs on the finest level only, with a quarter of the iterations,
    starting from the previous solution.
    """
    if not dataset:
        raise ValueError("empty dataset")
    lambdas = continuation_lambdas(lambda_min, lambda_max, n_points, anchors)
    method = method or default_method(config)
    chains = _map(_run_chain, [(pair, lambdas, config, method) for pair in dataset], jobs)
    records = [rec for chain in chains for rec in chain]
    _check_completion(records)
    return records


@dataclass(frozen=True)
class ArcPoint:
    lam: float
    alignment_mean: float
    alignment_std: float
    regularity_mean: float
    regularity_std: float
    n_pairs: int
    n_failed: int = 0
    alignment_median: float = math.nan
    alignment_iqr: float = math.nan
    regularity_median: float = math.nan
    regularity_iqr: float = math.nan

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "alignment_mean": self.alignment_mean, "alignment_std": self.alignment_std,
            "regularity_mean": self.regularity_mean, "regularity_std": self.regularity_std,
            "n_pairs": self.n_pairs, "n_failed": self.n_failed,
            "alignment_median": self.alignment_median, "alignment_iqr": self.alignment_iqr,
            "regularity_median": self.regularity_median, "regularity_iqr": self.regularity_iqr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArcPoint":
        d = dict(d)
        d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class ArcCurve:
    alignment_metric: AlignMetric
    regularity_metric: RegulMetric
    points: tuple[ArcPoint, ...]
    method_label: str
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "alignment_metric", AlignMetric(self.alignment_metric))
        object.__setattr__(self, "regularity_metric", RegulMetric(self.regularity_metric))
        pts = tuple(sorted(self.points, key=lambda p: (p.regularity_mean, p.lam)))
        lams = [p.lam for p in pts]
        if len(set(lams)) != len(lams):
            raise ValueError("curve lambdas must be unique")
        object.__setattr__(self, "points", pts)

    @property
    def axes(self) -> Axes:
        return Axes(self.alignment_metric, self.regularity_metric)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "method_label": self.method_label,
            "alignment_metric": self.alignment_metric.value,
            "regularity_metric": self.regularity_metric.value,
            "interpolation": "linear",
            "metadata": dict(self.metadata),
            "points": [p.to_dict() for p in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArcCurve":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported curve schema {d.get('schema')!r}")
        return cls(d["alignment_metric"], d["regularity_metric"],
                   tuple(ArcPoint.from_dict(p) for p in d["points"]),
                   d["method_label"], d.get("metadata", {}))


def _iqr(values) -> float:
    q75, q25 = np.percentile(values, [75, 25])
    return float(q75 - q25)


def aggregate(records, axes: Axes = Axes(), method_label: str | None = None) -> ArcCurve:
    """Group records by lambda into mean/std points ordered by regularity."""
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    a_attr, r_attr = axes.alignment.attr, axes.regularity.attr
    groups: dict[float, list[ArcRecord]] = {}
    for rec in records:
        groups.setdefault(rec.lam, []).append(rec)
    points = []
    for lam in sorted(groups):
        ok = sorted((r for r in groups[lam] if not r.failed), key=lambda r: r.pair_id)
        n_failed = len(groups[lam]) - len(ok)
        if not ok:
            raise ValueError(f"lambda {lam!r}: no successful records")
        align = np.array([r.value(a_attr) for r in ok], dtype=object)
        if any(v is None for v in align):
            raise ValueError(f"lambda {lam!r}: records lack {a_attr}")
        align = align.astype(np.float64)
        regul = np.array([r.value(r_attr) for r in ok], dtype=np.float64)
        points.append(ArcPoint(
            lam=float(lam),
            alignment_mean=float(np.mean(align)), alignment_std=float(np.std(align)),
            regularity_mean=float(np.mean(regul)), regularity_std=float(np.std(regul)),
            n_pairs=len(ok), n_failed=n_failed,
            alignment_median=float(np.median(align)), alignment_iqr=_iqr(align),
            regularity_median=float(np.median(regul)), regularity_iqr=_iqr(regul),
        ))
    methods = sorted({r.method for r in records})
    label = method_label or "+".join(methods)
    warm = any(r.warm_start for r in records)
    meta = {"n_records": len(records), "n_failed": sum(r.failed for r in records),
            "aggregation": "mean+population_std", "amortization": "continuation" if warm else "none"}
    return ArcCurve(axes.alignment, axes.regularity, tuple(points), label, meta)


@dataclass(frozen=True)
class ReadOff:
    threshold: float
    alignment: float
    lambda_lo: float
    lambda_hi: float
    clamped: bool
    extrapolated: bool = False


def read_off(curve: ArcCurve, regularity_threshold: float) -> ReadOff:
    """Alignment interpolated linearly at a fixed regularity level.

    Thresholds outside the curve's regularity span return the nearest end
    point's alignment with ``clamped=True``.
    """
    pts = curve.points
    if len(pts) < 2:
        raise ValueError("read_off needs a curve with >= 2 points")
    t = float(regularity_threshold)
    regs = [p.regularity_mean for p in pts]
    if t < regs[0]:
        p = pts[0]
        return ReadOff(t, p.alignment_mean, p.lam, p.lam, clamped=True)
    if t > regs[-1]:
        p = pts[-1]
        return ReadOff(t, p.alignment_mean, p.lam, p.lam, clamped=True)
    i = bisect.bisect_right(regs, t) - 1
    if i >= len(pts) - 1:
        p = pts[-1]
        return ReadOff(t, p.alignment_mean, p.lam, p.lam, clamped=False)
    a, b = pts[i], pts[i + 1]
    frac = (t - a.regularity_mean) / (b.regularity_mean - a.regularity_mean)
    value = a.alignment_mean + frac * (b.alignment_mean - a.alignment_mean)
    return ReadOff(t, float(value), a.lam, b.lam, clamped=False)


@dataclass(frozen=True)
class RankedEntry:
    method: str
    alignment: float
    rank: int
    lambda_lo: float
    lambda_hi: float
    clamped: bool


@dataclass(frozen=True)
class Comparison:
    axes: Axes
    thresholds: tuple[float, ...]
    rankings: dict  # threshold -> list[RankedEntry], best first
    dominates: dict  # method -> bool
    spectra: dict  # method -> list of (regularity_mean, alignment_mean, lambda)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold", "rank", "method", "alignment", "lambda_lo", "lambda_hi",
                         "clamped", "dominates"])
        for t in self.thresholds:
            for e in self.rankings[t]:
                writer.writerow([repr(t), e.rank, e.method, repr(e.alignment), repr(e.lambda_lo),
                                 repr(e.lambda_hi), str(e.clamped).lower(),
                                 str(self.dominates[e.method]).lower()])
        return buf.getvalue()


def compare(curves, thresholds) -> Comparison:
    """Rank curves by interpolated alignment at each regularity threshold.

    Equal alignments share a rank. A method dominates when it is strictly
    better than every other curve at every threshold.
    """
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to compare")
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ValueError("no thresholds")
    axes = curves[0].axes
    if any(c.axes != axes for c in curves):
        raise ValueError("curves do not share alignment/regularity axes")
    labels = [c.method_label for c in curves]
    if len(set(labels)) != len(labels):
        # keep duplicated labels distinguishable in the table
        labels = [f"{lab}#{i}" for i, lab in enumerate(labels)]
    better = axes.alignment.higher_is_better
    rankings = {}
    strictly_best = {lab: True for lab in labels}
    for t in thresholds:
        reads = [(lab, read_off(c, t)) for lab, c in zip(labels, curves)]
        ordered = sorted(reads, key=lambda lr: (-lr[1].alignment if better else lr[1].alignment, lr[0]))
        entries = []
        for pos, (lab, ro) in enumerate(ordered):
            if pos and ro.alignment == entries[-1].alignment:
                rank = entries[-1].rank
            else:
                rank = pos + 1
            entries.append(RankedEntry(lab, ro.alignment, rank, ro.lambda_lo, ro.lambda_hi, ro.clamped))
        rankings[t] = entries
        for e in entries:
            others = [o.alignment for o in entries if o.method != e.method]
            if others and not all((e.alignment > o) if better else (e.alignment < o) for o in others):
                strictly_best[e.method] = False
    spectra = {lab: [(p.regularity_mean, p.alignment_mean, p.lam) for p in c.points]
               for lab, c in zip(labels, curves)}
    return Comparison(axes, thresholds, rankings, strictly_best, spectra)
