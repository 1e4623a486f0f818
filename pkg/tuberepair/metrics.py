"""Keypoint similarity scores and the thresholded AP report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tuberepair.errors import UsageError, ValidationError
from tuberepair.heatmap import HeatmapTensor, KeypointTarget, decode_argmax
from tuberepair.maybe import Just, Maybe, Nothing
from tuberepair.util import PathLike, atomic_write_text

DEFAULT_LAMBDA = 0.2
THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SIZE_BINS = {"S": (0.0, 2.0), "M": (2.0, 3.0), "L": (3.0, math.inf)}  # (low, high] on branch mean radius
ZERO_VISIBLE_MODES = ("exclude", "zero")


@dataclass(frozen=True)
class MetricsConfig:
    lam: float = DEFAULT_LAMBDA
    zero_visible: str = "exclude"

    def __post_init__(self):
        if self.lam <= 0:
            raise UsageError(f"lambda must be positive, got {self.lam}")
        if self.zero_visible not in ZERO_VISIBLE_MODES:
            raise UsageError(f"zero_visible must be one of {ZERO_VISIBLE_MODES}, got {self.zero_visible!r}")


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    distances: Tuple[float, ...]  # Per keypoint, voxel units
    visibility: Tuple[bool, ...]
    branch_volume_S: float
    branch_mean_radius: float
    crop_index: int = 0


def oks_k(d_k: float, S: float, lam: float = DEFAULT_LAMBDA) -> float:
    """Similarity of one keypoint, normalized by the branch volume.

    Example
    -------
    >>> round(oks_k(2.0, 100.0), 5)
    0.60653
    """
    if S <= 0:
        raise ValidationError(f"branch volume must be positive, got {S}")
    return math.exp(-d_k * d_k / (2.0 * S * lam * lam))


def e_d(d_k: float) -> float:
    return math.exp(-d_k * d_k)


def oks_sample(record: EvalRecord, lam: float = DEFAULT_LAMBDA) -> Maybe[float]:
    """Mean OKS over visible keypoints, Nothing when none is visible."""
    values = [oks_k(d, record.branch_volume_S, lam) for d, v in zip(record.distances, record.visibility) if v]
    if not values:
        return Nothing()
    return Just(math.fsum(values) / len(values))


def ap_tau(values: Sequence[float], tau: float) -> float:
    """Fraction of values strictly above tau.

    Raises
    ------
    ValidationError
        values is empty
    """
    if not values:
        raise ValidationError("no defined samples")
    return sum(1 for v in values if v > tau) / len(values)


def mean_ap(values: Sequence[float]) -> Maybe[float]:
    if not values:
        return Nothing()
    return Just(math.fsum(ap_tau(values, tau) for tau in THRESHOLDS) / len(THRESHOLDS))


def _mean(values: Sequence[float]) -> Maybe[float]:
    return Just(math.fsum(values) / len(values)) if values else Nothing()


def in_bin(radius: float, name: str) -> bool:
    low, high = SIZE_BINS[name]
    return low < radius <= high


@dataclass(frozen=True)
class MetricsReport:
    AP: Maybe[float]
    AP50: Maybe[float]
    AP75: Maybe[float]
    AP_S: Maybe[float]
    AP_M: Maybe[float]
    AP_L: Maybe[float]
    AP_k1: Maybe[float]
    AP_k2: Maybe[float]
    E_d: Maybe[float]
    E_d_k1: Maybe[float]
    E_d_k2: Maybe[float]
    counts: Dict[str, int] = field(default_factory=dict)

    def values(self) -> Dict[str, Optional[float]]:
        """Metric name -> value, None where undefined."""
        return {f.name: getattr(self, f.name).to_optional() for f in fields(self) if f.name != "counts"}

    def document(self, extra: Optional[dict] = None) -> dict:
        return dict({"version": 1, "metrics": self.values(), "counts": dict(self.counts)}, **(extra or {}))


def _sample_scores(records: Sequence[EvalRecord], config: MetricsConfig) -> List[Tuple[EvalRecord, float]]:
    scored = []
    for record in records:
        score = oks_sample(record, config.lam)
        if score.is_just():
            scored.append((record, score.unwrap()))
        elif config.zero_visible == "zero":
            scored.append((record, 0.0))
    return scored


def full_report(records: Sequence[EvalRecord], config: MetricsConfig = MetricsConfig()) -> MetricsReport:
    """AP over ten thresholds, AP50, AP75, size bins, per keypoint AP and E_d of a set of evaluated crops.

    Undefined values (an empty size bin, no visible keypoint) are Nothing.

    Raises
    ------
    ValidationError
        No records, a record with non-positive branch radius, or no sample with a visible keypoint
    """
    if not records:
        raise ValidationError("no records to evaluate")
    for record in records:
        if not record.branch_mean_radius > 0:
            raise ValidationError(f"record {record.sample_id} has branch radius {record.branch_mean_radius}")
    scored = _sample_scores(records, config)
    if not scored:
        raise ValidationError("no defined samples")
    values = [score for _, score in scored]
    bins = {name: [score for record, score in scored if in_bin(record.branch_mean_radius, name)]
            for name in SIZE_BINS}
    per_keypoint: List[List[float]] = [[], []]
    distance_scores: List[List[float]] = [[], []]
    for record in records:
        for k, (d, visible) in enumerate(zip(record.distances, record.visibility)):
            if visible:
                per_keypoint[k].append(oks_k(d, record.branch_volume_S, config.lam))
                distance_scores[k].append(e_d(d))
    counts = {"records": len(records), "defined": len(scored)}
    counts.update({f"bin_{name}": len(bins[name]) for name in SIZE_BINS})
    counts.update({f"visible_k{k + 1}": len(per_keypoint[k]) for k in range(2)})
    return MetricsReport(
        AP=mean_ap(values),
        AP50=Just(ap_tau(values, 0.5)),
        AP75=Just(ap_tau(values, 0.75)),
        AP_S=mean_ap(bins["S"]),
        AP_M=mean_ap(bins["M"]),
        AP_L=mean_ap(bins["L"]),
        AP_k1=mean_ap(per_keypoint[0]),
        AP_k2=mean_ap(per_keypoint[1]),
        E_d=_mean(distance_scores[0] + distance_scores[1]),
        E_d_k1=_mean(distance_scores[0]),
        E_d_k2=_mean(distance_scores[1]),
        counts=counts,
    )


def evaluate_crop(pred: HeatmapTensor, target: KeypointTarget, sample_id: str, branch_volume_S: float,
                  branch_mean_radius: float, crop_index: int = 0) -> EvalRecord:
    """Record of one crop: argmax decoded keypoints against the target in the crop frame."""
    decoded = decode_argmax(pred)
    distances = tuple(float(np.linalg.norm(np.subtract(p, t).astype(np.float64)))
                      for p, t in zip(decoded, target.coords))
    return EvalRecord(sample_id, distances, tuple(target.visibility), float(branch_volume_S),
                      float(branch_mean_radius), crop_index)


def _csv_text(rows: Sequence[dict], fieldnames: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return buffer.getvalue()


def write_report_csv(path: PathLike, reports: Sequence[Tuple[str, MetricsReport]]) -> None:
    """One row per variant, metrics in percent, empty cells where undefined."""
    rows = []
    for variant, report in reports:
        row = {"variant": variant}
        row.update({name: None if value is None else round(100.0 * value, 6)
                    for name, value in report.values().items()})
        rows.append(row)
    names = ["variant"] + [f.name for f in fields(MetricsReport) if f.name != "counts"]
    atomic_write_text(path, _csv_text(rows, names))


SAMPLE_COLUMNS = ("sample_id", "crop_index", "branch_mean_radius", "branch_volume_S", "d_k1", "d_k2", "visible_k1",
                  "visible_k2", "oks_k1", "oks_k2", "e_d_k1", "e_d_k2", "oks_i")


def sample_rows(records: Sequence[EvalRecord], lam: float = DEFAULT_LAMBDA) -> List[dict]:
    rows = []
    for record in records:
        row = {"sample_id": record.sample_id, "crop_index": record.crop_index,
               "branch_mean_radius": record.branch_mean_radius, "branch_volume_S": record.branch_volume_S,
               "oks_i": oks_sample(record, lam).to_optional()}
        for k, (d, visible) in enumerate(zip(record.distances, record.visibility), start=1):
            row[f"d_k{k}"] = d
            row[f"visible_k{k}"] = int(visible)
            row[f"oks_k{k}"] = oks_k(d, record.branch_volume_S, lam) if visible else None
            row[f"e_d_k{k}"] = e_d(d) if visible else None
        rows.append(row)
    return rows


def write_samples_csv(path: PathLike, records: Sequence[EvalRecord], lam: float = DEFAULT_LAMBDA) -> None:
    atomic_write_text(path, _csv_text(sample_rows(records, lam), SAMPLE_COLUMNS))
