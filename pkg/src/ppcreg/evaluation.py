"""Registration metrics (mTRE, mRPD, success ratio) and report export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, NoIntersectionError
from .geometry import ProjectionGeometry, RigidTransform, backproject_ray, project

SUCCESS_THRESHOLD = 5.0  # mm
CSV_COLUMNS = ("sample_id", "mtre_init_mm", "mrpd_mm", "success", "iterations", "runtime_ms")
REPORT_VERSION = 1


def _targets(targets) -> np.ndarray:
    x = np.asarray(targets, dtype=float).reshape(-1, 3)
    if len(x) == 0:
        raise InvalidArgumentError("at least one target point is required")
    return x


def mtre(T_a: RigidTransform, T_b: RigidTransform, targets) -> float:
    """Mean distance between the targets moved by ``T_a`` and by ``T_b``."""
    x = _targets(targets)
    return float(np.mean(np.linalg.norm(T_a.apply(x) - T_b.apply(x), axis=1)))


def mrpd_detail(T_est: RigidTransform, T_true: RigidTransform, targets, geom: ProjectionGeometry):
    """``(mrpd, n_skipped)``; targets whose projection is undefined are skipped."""
    x = _targets(targets)
    est = T_est.apply(x)
    truth = T_true.apply(x)
    try:
        origin, d = backproject_ray(project(est, geom), geom)
    except NoIntersectionError:
        pass
    else:
        v = truth - origin
        perp = v - np.einsum("ij,ij->i", v, d)[:, None] * d
        return float(np.mean(np.linalg.norm(perp, axis=1))), 0
    dists = []
    for e, t in zip(est, truth):
        try:
            origin, d = backproject_ray(project(e, geom), geom)
        except NoIntersectionError:
            continue
        v = t - origin
        dists.append(np.linalg.norm(v - (v @ d) * d))
    if not dists:
        raise NoIntersectionError("no target has a defined projection")
    return float(np.mean(dists)), len(x) - len(dists)


def mrpd(T_est: RigidTransform, T_true: RigidTransform, targets, geom: ProjectionGeometry) -> float:
    """Mean distance from the true targets to the rays through their estimated projections."""
    return mrpd_detail(T_est, T_true, targets, geom)[0]


@dataclass(frozen=True)
class EvaluationRecord:
    sample_id: str
    mtre_init: float
    mrpd: float
    iterations: int
    runtime_ms: float
    threshold: float = SUCCESS_THRESHOLD

    def __post_init__(self):
        if self.mtre_init < 0 or self.mrpd < 0:
            raise InvalidArgumentError("distances must be >= 0")

    @property
    def success(self) -> bool:
        return self.mrpd <= self.threshold


@dataclass(frozen=True)
class SuccessSummary:
    ratio: float
    n: int
    n_success: int
    mrpd_mean: float  # over successful cases only
    mrpd_std: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def _errors(records) -> np.ndarray:
    vals = [r.mrpd if isinstance(r, EvaluationRecord) else float(r) for r in records]
    if not vals:
        raise InvalidArgumentError("at least one record is required")
    return np.asarray(vals, dtype=float)


def success_summary(records, threshold: float = SUCCESS_THRESHOLD) -> SuccessSummary:
    """SR plus mean/std of mRPD over the successes (NaN when there are none)."""
    e = _errors(records)
    ok = e <= threshold
    good = e[ok]
    mean = float(good.mean()) if len(good) else float("nan")
    std = float(good.std()) if len(good) else float("nan")
    return SuccessSummary(float(ok.mean()), len(e), int(ok.sum()), mean, std, float(threshold))


def success_ratio(records, threshold: float = SUCCESS_THRESHOLD) -> float:
    """Fraction of records (EvaluationRecords or raw mRPD values) with mRPD <= threshold."""
    return success_summary(records, threshold).ratio


def ecdf(values):
    """Sorted values and cumulative fractions ``k / n``."""
    x = np.sort(np.asarray(values, dtype=float))
    return x, np.arange(1, len(x) + 1) / len(x)


def _fmt(v: float) -> str:
    return repr(float(v))


def export_report(records, csv_path, summary_path, ecdf_path, threshold: float = SUCCESS_THRESHOLD,
                  extra: dict | None = None) -> SuccessSummary:
    """Write per-record CSV, summary JSON and ECDF CSV; outputs are byte-stable."""
    records = list(records)
    summary = success_summary(records, threshold)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in records:
        wr.writerow([r.sample_id, _fmt(r.mtre_init), _fmt(r.mrpd), int(r.mrpd <= threshold),
                     r.iterations, _fmt(r.runtime_ms)])
    Path(csv_path).write_text(buf.getvalue())

    doc = {
        "report_version": REPORT_VERSION,
        "csv_columns": list(CSV_COLUMNS),
        "success_ratio": summary.ratio,
        "n": summary.n,
        "n_success": summary.n_success,
        "threshold_mm": summary.threshold,
        "mrpd_mean_mm": None if np.isnan(summary.mrpd_mean) else summary.mrpd_mean,
        "mrpd_std_mm": None if np.isnan(summary.mrpd_std) else summary.mrpd_std,
        "mrpd_stats_over": "successes",
    }
    if extra:
        doc.update(extra)
    Path(summary_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    x, f = ecdf([r.mrpd for r in records])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["mrpd_mm", "fraction"])
    for a, b in zip(x, f):
        wr.writerow([_fmt(a), _fmt(b)])
    Path(ecdf_path).write_text(buf.getvalue())
    return summary
