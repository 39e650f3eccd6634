"""Radial-error metrics, detection-rate aggregation, and isolation analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import FRAME_RESIZED, LandmarkSet

SDR_RADII = (2.0, 2.5, 3.0, 4.0)

COHORT_TARGETED = "targeted"
COHORT_STATIONARY = "stationary"
COHORT_ALL = "all"


def radial_error(
    pred: LandmarkSet,
    ref: LandmarkSet,
    spacing_mm: float = 1.0,
    frame_scale: tuple[float, float] | None = None,
) -> np.ndarray:
    """Per-landmark Euclidean distance in millimeters.

    Both sets must share a frame. Resized-frame points are mapped back to
    original pixels with the per-axis `frame_scale` (resized -> original)
    before measuring; distances are then multiplied by the pixel spacing.
    """
    if pred.frame != ref.frame:
        raise ValueError(f"frame mismatch: {pred.frame!r} vs {ref.frame!r}")
    if pred.num_landmarks != ref.num_landmarks:
        raise ValueError(
            f"landmark count mismatch: {pred.num_landmarks} vs {ref.num_landmarks}"
        )
    sx, sy = (1.0, 1.0)
    if pred.frame == FRAME_RESIZED and frame_scale is not None:
        sx, sy = frame_scale
    delta = pred.as_array() - ref.as_array()
    return np.hypot(delta[:, 0] * sx, delta[:, 1] * sy) * spacing_mm


@dataclass(frozen=True)
class ErrorSummary:
    count: int
    mre: float
    medre: float
    sdr: dict[float, float]  # radius (mm) -> percentage of errors <= radius

    def as_dict(self) -> dict:
        return {
            "count": self.count,
            "mre": self.mre,
            "medre": self.medre,
            "sdr": {str(r): v for r, v in self.sdr.items()},
        }


def aggregate(errors, radii=SDR_RADII) -> ErrorSummary:
    """Mean, median, and detection rate at each radius (<= r, inclusive)."""
    arr = np.asarray(errors, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty error list")
    sdr = {float(r): float(100.0 * np.mean(arr <= r)) for r in radii}
    return ErrorSummary(
        count=int(arr.size),
        mre=float(arr.mean()),
        medre=float(np.median(arr)),
        sdr=sdr,
    )


def isolation_degree(landmark_sets, num_neighbors: int = 5) -> np.ndarray:
    """Per landmark: average over images of the mean distance to its
    `num_neighbors` nearest other landmarks in that image."""
    if not landmark_sets:
        raise ValueError("need at least one landmark set")
    k = landmark_sets[0].num_landmarks
    if k < num_neighbors + 1:
        raise ValueError(f"need more than {num_neighbors} landmarks, got {k}")
    totals = np.zeros(k, dtype=np.float64)
    for lms in landmark_sets:
        if lms.num_landmarks != k:
            raise ValueError("landmark sets have inconsistent sizes")
        pts = lms.as_array()
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        np.fill_diagonal(dist, np.inf)
        nearest = np.sort(dist, axis=1)[:, :num_neighbors]
        totals += nearest.mean(axis=1)
    return totals / len(landmark_sets)


@dataclass(frozen=True)
class IsolationReport:
    pearson_r: float | None  # None when either variable has zero variance
    table: tuple[tuple[int, float, float], ...]  # (landmark, isolation, error)

    @property
    def defined(self) -> bool:
        return self.pearson_r is not None


def isolation_vs_error(isolation, per_landmark_error) -> IsolationReport:
    """Pearson correlation between isolation degree and per-landmark error.

    Landmarks with NaN error (never measured) stay in the table but are
    excluded from the correlation.
    """
    iso = np.asarray(isolation, dtype=np.float64)
    err = np.asarray(per_landmark_error, dtype=np.float64)
    if iso.shape != err.shape or iso.ndim != 1:
        raise ValueError(f"shape mismatch: {iso.shape} vs {err.shape}")
    table = tuple((i, float(iso[i]), float(err[i])) for i in range(iso.size))
    valid = np.isfinite(err) & np.isfinite(iso)
    x, y = iso[valid], err[valid]
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return IsolationReport(pearson_r=None, table=table)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float((xc**2).sum() * (yc**2).sum()))
    if denom == 0.0:
        return IsolationReport(pearson_r=None, table=table)
    return IsolationReport(pearson_r=float((xc * yc).sum() / denom), table=table)


@dataclass
class ErrorRecord:
    """One measured landmark error within one attack attempt."""

    image_id: str
    attempt: int
    landmark: int  # 0-based in memory, 1-based in CSV exports
    cohort: str
    error: float


@dataclass
class EvalReport:
    """Long-form error records plus run metadata; aggregates on demand."""

    records: list[ErrorRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def errors(self, cohort: str | None = None) -> np.ndarray:
        if cohort in (None, COHORT_ALL):
            selected = self.records
        else:
            selected = [r for r in self.records if r.cohort == cohort]
        return np.array([r.error for r in selected], dtype=np.float64)

    def summary(self, cohort: str | None = None, radii=SDR_RADII) -> ErrorSummary:
        return aggregate(self.errors(cohort), radii=radii)

    def per_landmark_mean(self, num_landmarks: int, cohort: str | None = None) -> np.ndarray:
        """Mean error per landmark over matching records; NaN where unmeasured."""
        sums = np.zeros(num_landmarks)
        counts = np.zeros(num_landmarks)
        for r in self.records:
            if cohort in (None, COHORT_ALL) or r.cohort == cohort:
                sums[r.landmark] += r.error
                counts[r.landmark] += 1
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "attempt", "landmark", "cohort", "error"])
            for r in self.records:
                writer.writerow([r.image_id, r.attempt, r.landmark + 1, r.cohort, repr(r.error)])
        return path

    @classmethod
    def read_csv(cls, path, metadata: dict | None = None) -> "EvalReport":
        records = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(
                    ErrorRecord(
                        image_id=row["image_id"],
                        attempt=int(row["attempt"]),
                        landmark=int(row["landmark"]) - 1,
                        cohort=row["cohort"],
                        error=float(row["error"]),
                    )
                )
        return cls(records=records, metadata=metadata or {})

    def write_json(self, path, radii=SDR_RADII) -> Path:
        payload = {"metadata": self.metadata, "cohorts": {}}
        for cohort in (COHORT_ALL, COHORT_TARGETED, COHORT_STATIONARY):
            errs = self.errors(cohort)
            if errs.size:
                payload["cohorts"][cohort] = aggregate(errs, radii=radii).as_dict()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2))
        return path
