"""Seeded random-target attack sweeps over iteration and epsilon grids.

One target spec is drawn per (image, attempt) pair and reused across every
grid point and both attack variants, so comparisons are paired. Targeted
errors are measured to the attacker's desired positions, stationary errors
to the dataset ground truth; iteration-0 rows double as the clean-model
baseline.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import (
    AttackConfig,
    TargetSpec,
    default_target_rect,
    perturbation_within_budget,
    random_target_spec,
    run_attack,
)
from .codec import CodecConfig, LandmarkSet
from .detector import MultiTaskUNet
from .metrics import COHORT_STATIONARY, COHORT_TARGETED, ErrorSummary, aggregate
from .seeding import named_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    iterations: int = 300
    trace_iterations: tuple[int, ...] = (20, 50, 100, 300)
    epsilon: float = 8.0                       # reference point, in levels
    epsilon_grid: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    eta: float = 0.05
    adaptive: bool = True
    compare_variants: bool = True              # also run the flipped variant at the reference epsilon
    attempts_per_image: int = 2
    rect: tuple[float, float, float, float] | None = None
    seed: int = 0
    workers: int = 1
    alpha: float = 1.0
    spacing_mm: float = 1.0
    frame_scale: tuple[float, float] | None = None

    def attack_config(self, epsilon: float, adaptive: bool) -> AttackConfig:
        return AttackConfig(
            epsilon=epsilon,
            eta=self.eta,
            iterations=self.iterations,
            adaptive=adaptive,
            trace_every=0,
        )


@dataclass
class SweepRecord:
    """One landmark error at one grid point of one attack attempt."""

    epsilon: float
    iteration: int
    adaptive: bool
    image_id: str
    attempt: int
    landmark: int  # 0-based
    cohort: str
    error: float


@dataclass
class AttemptInfo:
    epsilon: float
    adaptive: bool
    image_id: str
    attempt: int
    spec: TargetSpec
    linf: float
    budget_ok: bool
    range_ok: bool
    wall_time_s: float
    weight_mean_max_dev: float  # max |mean(weights) - 1| over iterations; 0 when not adaptive


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    records: list[SweepRecord] = field(default_factory=list)
    attempts: list[AttemptInfo] = field(default_factory=list)

    def select(
        self,
        cohort: str,
        epsilon: float | None = None,
        iteration: int | None = None,
        adaptive: bool | None = None,
    ) -> np.ndarray:
        return np.array(
            [
                r.error
                for r in self.records
                if r.cohort == cohort
                and (epsilon is None or r.epsilon == epsilon)
                and (iteration is None or r.iteration == iteration)
                and (adaptive is None or r.adaptive == adaptive)
            ],
            dtype=np.float64,
        )

    def summarize(self, cohort: str, **where) -> ErrorSummary:
        return aggregate(self.select(cohort, **where))

    def iteration_table(self) -> list[dict]:
        """Targeted/stationary summaries per snapshot at the reference epsilon."""
        cfg = self.config
        iters = sorted({r.iteration for r in self.records if r.epsilon == cfg.epsilon})
        rows = []
        for it in iters:
            row = {"iteration": it, "epsilon": cfg.epsilon, "adaptive": cfg.adaptive}
            for cohort in (COHORT_TARGETED, COHORT_STATIONARY):
                errs = self.select(cohort, epsilon=cfg.epsilon, iteration=it, adaptive=cfg.adaptive)
                if errs.size:
                    summary = aggregate(errs)
                    row[f"{cohort}_mre"] = summary.mre
                    row[f"{cohort}_medre"] = summary.medre
                    row[f"{cohort}_sdr4"] = summary.sdr[4.0]
            rows.append(row)
        return rows

    def epsilon_table(self) -> list[dict]:
        """Targeted/stationary summaries per epsilon at the final iteration."""
        cfg = self.config
        rows = []
        for eps in sorted({r.epsilon for r in self.records}):
            row = {"epsilon": eps, "iteration": cfg.iterations, "adaptive": cfg.adaptive}
            for cohort in (COHORT_TARGETED, COHORT_STATIONARY):
                errs = self.select(
                    cohort, epsilon=eps, iteration=cfg.iterations, adaptive=cfg.adaptive
                )
                if errs.size:
                    summary = aggregate(errs)
                    row[f"{cohort}_mre"] = summary.mre
                    row[f"{cohort}_medre"] = summary.medre
                    row[f"{cohort}_sdr4"] = summary.sdr[4.0]
            rows.append(row)
        return rows

    def variant_curves(self) -> dict[bool, list[tuple[int, float]]]:
        """Mean targeted error per snapshot for each variant at the reference epsilon."""
        curves: dict[bool, list[tuple[int, float]]] = {}
        for adaptive in (True, False):
            iters = sorted(
                {
                    r.iteration
                    for r in self.records
                    if r.epsilon == self.config.epsilon and r.adaptive == adaptive
                }
            )
            points = []
            for it in iters:
                errs = self.select(
                    COHORT_TARGETED, epsilon=self.config.epsilon, iteration=it, adaptive=adaptive
                )
                if errs.size:
                    points.append((it, float(errs.mean())))
            if points:
                curves[adaptive] = points
        return curves

    def budget_violations(self) -> int:
        return sum(1 for a in self.attempts if not (a.budget_ok and a.range_ok))

    def write_records_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epsilon", "iteration", "adaptive", "image_id", "attempt", "landmark", "cohort", "error"]
            )
            for r in self.records:
                writer.writerow(
                    [r.epsilon, r.iteration, int(r.adaptive), r.image_id, r.attempt, r.landmark + 1, r.cohort, repr(r.error)]
                )
        return path

    @staticmethod
    def read_records_csv(path) -> list[SweepRecord]:
        records = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(
                    SweepRecord(
                        epsilon=float(row["epsilon"]),
                        iteration=int(row["iteration"]),
                        adaptive=bool(int(row["adaptive"])),
                        image_id=row["image_id"],
                        attempt=int(row["attempt"]),
                        landmark=int(row["landmark"]) - 1,
                        cohort=row["cohort"],
                        error=float(row["error"]),
                    )
                )
        return records


def draw_target_specs(
    images: list[tuple[str, np.ndarray, LandmarkSet]],
    num_landmarks: int,
    config: BenchmarkConfig,
) -> list[tuple[str, int, TargetSpec]]:
    """One seeded spec per (image, attempt), in a fixed order."""
    rng = named_rng(config.seed, "target-spec")
    specs = []
    for image_id, image, clean in images:
        height, width = image.shape[-2:]
        rect = config.rect if config.rect is not None else default_target_rect(width, height)
        for attempt in range(config.attempts_per_image):
            specs.append(
                (image_id, attempt, random_target_spec(rng, num_landmarks, rect, clean))
            )
    return specs


def _errors_mm(pred: LandmarkSet, ref_points: np.ndarray, config: BenchmarkConfig, indices) -> np.ndarray:
    sx, sy = config.frame_scale if config.frame_scale is not None else (1.0, 1.0)
    pts = pred.as_array()[list(indices)].reshape(-1, 2)
    delta = pts - ref_points
    return np.hypot(delta[:, 0] * sx, delta[:, 1] * sy) * config.spacing_mm


def _run_one(
    model: MultiTaskUNet,
    codec: CodecConfig,
    config: BenchmarkConfig,
    job: tuple[str, int, TargetSpec, np.ndarray, LandmarkSet, float, bool, bool],
) -> tuple[list[SweepRecord], AttemptInfo]:
    image_id, attempt, spec, image, gt, epsilon, adaptive, emit_all_snapshots = job
    attack_cfg = config.attack_config(epsilon, adaptive)
    result = run_attack(
        model, image, spec, attack_cfg, codec, alpha=config.alpha, trace_at=config.trace_iterations
    )

    desired = np.array([(t.x, t.y) for t in spec.targeted], dtype=np.float64).reshape(-1, 2)
    gt_stationary = gt.as_array()[list(spec.stationary)].reshape(-1, 2)

    records = []
    for point in result.trace:
        if not emit_all_snapshots and point.iteration != config.iterations:
            continue
        targeted_mm = _errors_mm(point.landmarks, desired, config, spec.targeted_indices)
        stationary_mm = _errors_mm(point.landmarks, gt_stationary, config, spec.stationary)
        for landmark, err in zip(spec.targeted_indices, targeted_mm):
            records.append(
                SweepRecord(epsilon, point.iteration, adaptive, image_id, attempt, landmark, COHORT_TARGETED, float(err))
            )
        for landmark, err in zip(spec.stationary, stationary_mm):
            records.append(
                SweepRecord(epsilon, point.iteration, adaptive, image_id, attempt, landmark, COHORT_STATIONARY, float(err))
            )

    info = AttemptInfo(
        epsilon=epsilon,
        adaptive=adaptive,
        image_id=image_id,
        attempt=attempt,
        spec=spec,
        linf=result.linf,
        budget_ok=perturbation_within_budget(
            result.adversarial, result.adversarial - result.perturbation, attack_cfg.epsilon_normalized
        ),
        range_ok=bool(result.adversarial.min() >= -1.0 and result.adversarial.max() <= 1.0),
        wall_time_s=result.wall_time_s,
        weight_mean_max_dev=(
            float(np.abs(result.weight_means - 1.0).max())
            if result.weight_means is not None and result.weight_means.size
            else 0.0
        ),
    )
    return records, info


def run_benchmark(
    model: MultiTaskUNet,
    images: list[tuple[str, np.ndarray, LandmarkSet]],
    codec: CodecConfig,
    config: BenchmarkConfig,
) -> BenchmarkResult:
    """Run the full sweep: every epsilon in the grid at the configured
    iteration budget, with per-snapshot rows at the reference epsilon, plus
    (optionally) the flipped adaptive/non-adaptive variant for comparison.

    `images` holds (image_id, normalized image, ground-truth landmarks in
    the resized frame).
    """
    num_landmarks = model.arch.num_landmarks
    specs = draw_target_specs(images, num_landmarks, config)
    by_image = {image_id: (image, gt) for image_id, image, gt in images}

    eps_values = sorted(set(config.epsilon_grid) | {config.epsilon})
    jobs = []
    for epsilon in eps_values:
        reference = epsilon == config.epsilon
        for image_id, attempt, spec in specs:
            image, gt = by_image[image_id]
            jobs.append((image_id, attempt, spec, image, gt, epsilon, config.adaptive, reference))
    if config.compare_variants:
        for image_id, attempt, spec in specs:
            image, gt = by_image[image_id]
            jobs.append(
                (image_id, attempt, spec, image, gt, config.epsilon, not config.adaptive, True)
            )

    result = BenchmarkResult(config=config)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(lambda job: _run_one(model, codec, config, job), jobs))
    else:
        outputs = []
        for i, job in enumerate(jobs):
            outputs.append(_run_one(model, codec, config, job))
            logger.info(
                "attack %d/%d done (eps=%s adaptive=%s image=%s attempt=%d, %.1fs)",
                i + 1, len(jobs), job[5], job[6], job[0], job[1], outputs[-1][1].wall_time_s,
            )

    # Deterministic aggregation independent of completion order.
    outputs.sort(key=lambda pair: (pair[1].epsilon, pair[1].adaptive, pair[1].image_id, pair[1].attempt))
    for records, info in outputs:
        result.records.extend(records)
        result.attempts.append(info)
    return result
