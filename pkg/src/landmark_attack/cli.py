"""Command-line orchestration: train, detect, attack, benchmark, isolation,
visualize.

Every run resolves its configuration (defaults < --config file < flags),
serializes it into a run directory named by the config hash, and draws all
randomness from named streams under a single root seed. Exit codes: 0
success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .attack import (
    AttackConfig,
    load_target_spec,
    perturbation_within_budget,
    run_attack,
)
from .benchmark import BenchmarkConfig, BenchmarkResult, run_benchmark
from .codec import CodecConfig, LandmarkSet, decode, encode
from .data import (
    ISBI_FRAME_SCALE,
    ISBI_SPACING_MM,
    DatasetRecord,
    PreprocessSpec,
    denormalize_image,
    export_visualization,
    load_isbi,
    preprocess,
    synth_dataset,
)
from .detector import forward, load_checkpoint, predict_landmarks, train
from .metrics import (
    COHORT_ALL,
    ErrorRecord,
    EvalReport,
    isolation_degree,
    isolation_vs_error,
    radial_error,
)
from .presets import preset_codec, preset_preprocess, preset_train_config
from .seeding import named_rng, named_seed

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_dataset_flags(parser):
    parser.add_argument("--dataset", choices=("synthetic", "isbi"), default="synthetic")
    parser.add_argument("--data-root", type=Path, default=None, help="ISBI dataset root")
    parser.add_argument("--preset", choices=("desk", "full"), default="desk")
    parser.add_argument("--landmarks", type=int, default=8, help="synthetic landmark count")
    parser.add_argument("--train-images", type=int, default=200)
    parser.add_argument("--test-images", type=int, default=50)
    parser.add_argument("--noise", type=float, default=5.0, help="synthetic speckle noise std")


def _add_common_flags(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", type=Path, default=Path("runs"))
    parser.add_argument("--run-name", default=None, help="override the config-hash run name")
    parser.add_argument("--config", type=Path, default=None, help="JSON file of flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")


def _config_dict(args) -> dict:
    drop = {"func", "command", "config", "verbose"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in drop:
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _run_dir(args, command: str) -> Path:
    config = _config_dict(args)
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]
    name = args.run_name or f"{command}-{digest}"
    run_dir = Path(args.out_dir) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"command": command, **config}, indent=2, sort_keys=True)
    )
    return run_dir


def _load_records(
    args, with_val: bool = False
) -> tuple[list[DatasetRecord], list[DatasetRecord], list[DatasetRecord], dict]:
    """(train, eval, val records, metric units) for the selected dataset.

    The synthetic generator can mint a fresh validation split (used to steer
    the desk training schedule); the ISBI layout has none.
    """
    val_recs: list[DatasetRecord] = []
    if args.dataset == "isbi":
        if args.data_root is None:
            raise FileNotFoundError("--data-root is required for the isbi dataset")
        records = load_isbi(args.data_root)
        train_recs = [r for r in records if r.split == "train"]
        eval_recs = [r for r in records if r.split == "test1"]
        units = {"spacing_mm": ISBI_SPACING_MM, "frame_scale": ISBI_FRAME_SCALE, "error_units": "mm"}
    else:
        size = preset_preprocess(args.preset)
        rng = named_rng(args.seed, "dataset")
        train_recs = synth_dataset(
            rng, args.train_images, args.landmarks, (size.width, size.height),
            split="train", noise=args.noise,
        )
        eval_recs = synth_dataset(
            rng, args.test_images, args.landmarks, (size.width, size.height),
            split="test1", noise=args.noise,
        )
        if with_val:
            val_recs = synth_dataset(
                rng, max(args.test_images // 2, 4), args.landmarks,
                (size.width, size.height), split="val", noise=args.noise,
            )
        units = {"spacing_mm": 1.0, "frame_scale": (1.0, 1.0), "error_units": "px"}
    return train_recs, eval_recs, val_recs, units


def _preprocessed(records, spec: PreprocessSpec):
    return [(rec.image_id, *preprocess(rec, spec)) for rec in records]


def _detection_report(model, items, codec, units, metadata) -> EvalReport:
    report = EvalReport(metadata={**metadata, **{k: v for k, v in units.items() if k == "error_units"}})
    for image_id, image, gt in items:
        pred = predict_landmarks(model, image, codec)
        errs = radial_error(pred, gt, spacing_mm=units["spacing_mm"], frame_scale=units["frame_scale"])
        for i, err in enumerate(errs):
            report.records.append(ErrorRecord(image_id, 0, i, COHORT_ALL, float(err)))
    return report


def cmd_train(args) -> int:
    run_dir = _run_dir(args, "train")
    train_recs, eval_recs, val_recs, units = _load_records(args, with_val=True)
    codec = preset_codec(args.preset)
    pp_spec = preset_preprocess(args.preset)
    overrides = {}
    for field_name, flag in (
        ("epochs", "epochs"), ("batch_size", "batch_size"),
        ("learning_rate", "lr"), ("alpha", "alpha"), ("sigma", "sigma"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = value
    config = preset_train_config(args.preset, seed=named_seed(args.seed, "training"), **overrides)
    if config.sigma != codec.sigma:
        codec = CodecConfig(sigma=config.sigma, threshold=codec.threshold)

    pairs = []
    for rec in train_recs:
        image, lms = preprocess(rec, pp_spec)
        pairs.append((image, encode(lms, image.shape[-2:], codec)))
    val_items = [preprocess(rec, pp_spec) for rec in val_recs]
    logger.info("training on %d images (%s preset)", len(pairs), args.preset)
    checkpoint = run_dir / "checkpoint.pt"
    model = train(pairs, config, val_dataset=val_items, checkpoint_path=checkpoint)

    eval_items = _preprocessed(eval_recs, pp_spec)
    report = _detection_report(
        model, eval_items, codec,
        units, {"command": "train", "seed": args.seed, "preset": args.preset,
                "interpolation": "bilinear"},
    )
    report.write_csv(run_dir / "detection_errors.csv")
    report.write_json(run_dir / "detection_report.json")
    summary = report.summary()
    print(f"checkpoint: {checkpoint}")
    print(
        f"held-out MRE {summary.mre:.3f} {units['error_units']}, "
        f"MedRE {summary.medre:.3f}, SDR@4 {summary.sdr[4.0]:.1f}%"
    )
    return 0


def _resolve_image(args, pp_spec) -> tuple[str, np.ndarray, LandmarkSet | None, dict]:
    """Image for single-image commands: either --image FILE or a dataset id."""
    if args.image is not None:
        with Image.open(args.image) as im:
            arr = np.asarray(im.convert("L"))
        record = DatasetRecord(Path(args.image).stem, arr, LandmarkSet((), frame="original"), "adhoc")
        image, _ = preprocess(record, pp_spec)
        return record.image_id, image, None, {"spacing_mm": 1.0, "frame_scale": (1.0, 1.0), "error_units": "px"}
    _, eval_recs, _, units = _load_records(args)
    wanted = args.image_id
    for rec in eval_recs:
        if wanted in (None, rec.image_id):
            image, gt = preprocess(rec, pp_spec)
            return rec.image_id, image, gt, units
    raise FileNotFoundError(f"image id {wanted!r} not found in the evaluation split")


def cmd_detect(args) -> int:
    run_dir = _run_dir(args, "detect")
    model, train_cfg, codec = load_checkpoint(args.checkpoint)
    pp_spec = preset_preprocess(train_cfg.preset)
    image_id, image, gt, units = _resolve_image(args, pp_spec)
    pred = predict_landmarks(model, image, codec)
    payload = {
        "image_id": image_id,
        "frame": pred.frame,
        "landmarks": [[x, y] for x, y in pred.points],
    }
    if gt is not None:
        errs = radial_error(pred, gt, spacing_mm=units["spacing_mm"], frame_scale=units["frame_scale"])
        payload["errors"] = list(map(float, errs))
        payload["error_units"] = units["error_units"]
        payload["mre"] = float(errs.mean())
    out = run_dir / f"detect_{image_id}.json"
    out.write_text(json.dumps(payload, indent=2))
    print(f"wrote {out}")
    if "mre" in payload:
        print(f"MRE {payload['mre']:.3f} {units['error_units']}")
    return 0


def _write_trace(result, path: Path) -> None:
    payload = {
        "config": asdict(result.config),
        "iterations_run": result.iterations_run,
        "wall_time_s": result.wall_time_s,
        "linf": result.linf,
        "provenance": list(result.provenance),
        "weight_mean_max_dev": (
            float(np.abs(result.weight_means - 1.0).max())
            if result.weight_means is not None and result.weight_means.size
            else None
        ),
        "trace": [
            {
                "iteration": p.iteration,
                "total_loss": p.total_loss,
                "per_landmark_loss": list(map(float, p.per_landmark_loss)),
                "targeted_errors_px": list(map(float, p.targeted_errors)),
                "stationary_errors_px": list(map(float, p.stationary_errors)),
                "landmarks": [[x, y] for x, y in p.landmarks.points],
            }
            for p in result.trace
        ],
    }
    path.write_text(json.dumps(payload, indent=2))


def cmd_attack(args) -> int:
    run_dir = _run_dir(args, "attack")
    model, train_cfg, codec = load_checkpoint(args.checkpoint)
    pp_spec = preset_preprocess(train_cfg.preset)
    image_id, image, _, _ = _resolve_image(args, pp_spec)
    _, spec = load_target_spec(args.target_spec, model.arch.num_landmarks)
    config = AttackConfig(
        epsilon=args.epsilon,
        eta=args.eta,
        iterations=args.iterations,
        adaptive=args.adaptive,
        trace_every=args.trace_every,
        epsilon_units=args.epsilon_units,
        eta_units=args.eta_units,
    )
    result = run_attack(model, image, spec, config, codec, alpha=train_cfg.alpha)

    if not perturbation_within_budget(
        result.adversarial, result.adversarial - result.perturbation, config.epsilon_normalized
    ):
        raise RuntimeError("epsilon-ball invariant violated on the attack output")

    Image.fromarray(denormalize_image(image[0] if image.ndim == 3 else image)).save(run_dir / "clean.png")
    adv = result.adversarial
    Image.fromarray(denormalize_image(adv[0] if adv.ndim == 3 else adv)).save(run_dir / "adversarial.png")
    np.save(run_dir / "adversarial.npy", result.adversarial)
    _write_trace(result, run_dir / "trace.json")
    export_visualization(
        image, result.adversarial, result.clean_landmarks, result.final_landmarks,
        spec, run_dir / "panel.png", magnification=args.magnification,
    )
    targeted = result.trace[-1].targeted_errors
    print(f"attack on {image_id}: linf {result.linf:.6f} (budget {config.epsilon_normalized:.6f})")
    if targeted.size:
        print(f"targeted radial error px: mean {targeted.mean():.2f}, max {targeted.max():.2f}")
    print(f"outputs in {run_dir}")
    return 0


def _grid(text: str, cast=float) -> tuple:
    return tuple(cast(part) for part in text.split(",") if part.strip())


def cmd_benchmark(args) -> int:
    run_dir = _run_dir(args, "benchmark")
    model, train_cfg, codec = load_checkpoint(args.checkpoint)
    pp_spec = preset_preprocess(train_cfg.preset)
    _, eval_recs, _, units = _load_records(args)
    if args.images:
        eval_recs = eval_recs[: args.images]
    items = _preprocessed(eval_recs, pp_spec)

    config = BenchmarkConfig(
        iterations=args.iterations,
        trace_iterations=_grid(args.trace_iterations, int),
        epsilon=args.epsilon,
        epsilon_grid=_grid(args.epsilon_grid),
        eta=args.eta,
        adaptive=args.adaptive,
        compare_variants=args.compare,
        attempts_per_image=args.attempts,
        seed=args.seed,
        workers=args.workers,
        alpha=train_cfg.alpha,
        spacing_mm=units["spacing_mm"],
        frame_scale=units["frame_scale"],
    )
    result = run_benchmark(model, items, codec, config)

    result.write_records_csv(run_dir / "attempts.csv")
    _write_table(run_dir / "sweep_iterations.csv", result.iteration_table())
    _write_table(run_dir / "sweep_epsilon.csv", result.epsilon_table())
    curves = result.variant_curves()
    _plot_curves(curves, units["error_units"], run_dir / "mre_vs_iteration.png")

    summary = {
        "config": {**asdict(config)},
        "units": units["error_units"],
        "budget_violations": result.budget_violations(),
        "attempts": len(result.attempts),
        "max_weight_mean_deviation": max(
            (a.weight_mean_max_dev for a in result.attempts), default=0.0
        ),
        "iteration_table": result.iteration_table(),
        "epsilon_table": result.epsilon_table(),
        "curves": {("adaptive" if k else "plain"): v for k, v in curves.items()},
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"benchmark complete: {len(result.attempts)} attacks, "
          f"{result.budget_violations()} budget violations")
    for row in result.epsilon_table():
        print(
            f"  eps={row['epsilon']:g}: targeted MedRE "
            f"{row.get('targeted_medre', float('nan')):.3f} {units['error_units']}, "
            f"stationary MedRE {row.get('stationary_medre', float('nan')):.3f}"
        )
    print(f"outputs in {run_dir}")
    return 0


def _write_table(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    import csv as _csv

    keys = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _plot_curves(curves, units: str, path: Path) -> None:
    if not curves:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    styles = {True: ("adaptive", "tab:green"), False: ("plain iterative", "tab:blue")}
    for adaptive, points in sorted(curves.items(), reverse=True):
        label, color = styles[adaptive]
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", label=label, color=color)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"mean targeted radial error ({units})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_isolation(args) -> int:
    run_dir = _run_dir(args, "isolation")
    records_path = Path(args.benchmark_dir) / "attempts.csv"
    if not records_path.is_file():
        raise FileNotFoundError(f"no attempts.csv under {args.benchmark_dir}")
    records = BenchmarkResult.read_records_csv(records_path)
    if not records:
        raise ValueError(f"{records_path} holds no attack records")

    _, eval_recs, _, units = _load_records(args)
    # Isolation is a property of the ground-truth geometry; measure it in the
    # original frame so its units match the error columns.
    landmark_sets = [rec.landmarks for rec in eval_recs]
    num_landmarks = landmark_sets[0].num_landmarks
    iso = isolation_degree(landmark_sets) * units["spacing_mm"]

    final_iter = max(r.iteration for r in records)
    cohorts = ("targeted",) if not args.all_attempts else ("targeted", "stationary")
    sums = np.zeros(num_landmarks)
    counts = np.zeros(num_landmarks)
    for r in records:
        if r.iteration == final_iter and r.cohort in cohorts:
            sums[r.landmark] += r.error
            counts[r.landmark] += 1
    with np.errstate(invalid="ignore"):
        per_landmark = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    report = isolation_vs_error(iso, per_landmark)
    _write_table(
        run_dir / "isolation.csv",
        [
            {"landmark": i + 1, "isolation": iso_val, "mre": err, "attempts": int(counts[i])}
            for i, iso_val, err in report.table
        ],
    )
    payload = {
        "pearson_r": report.pearson_r,
        "defined": report.defined,
        "units": units["error_units"],
        "targeted_only": not args.all_attempts,
        "iteration": final_iter,
    }
    (run_dir / "isolation.json").write_text(json.dumps(payload, indent=2))
    _plot_isolation(report, units["error_units"], run_dir / "isolation.png")
    if report.defined:
        print(f"isolation-error Pearson r = {report.pearson_r:.3f} over {num_landmarks} landmarks")
    else:
        print("isolation-error correlation undefined (zero variance)")
    print(f"outputs in {run_dir}")
    return 0


def _plot_isolation(report, units: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [row[1] for row in report.table if np.isfinite(row[2])]
    ys = [row[2] for row in report.table if np.isfinite(row[2])]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xs, ys)
    for idx, iso, err in report.table:
        if np.isfinite(err):
            ax.annotate(str(idx + 1), (iso, err), fontsize=8)
    title = "undefined" if not report.defined else f"r = {report.pearson_r:.3f}"
    ax.set_title(f"isolation vs attack error ({title})")
    ax.set_xlabel(f"degree of isolation ({units})")
    ax.set_ylabel(f"mean radial error ({units})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_visualize(args) -> int:
    run_dir = _run_dir(args, "visualize")
    model, train_cfg, codec = load_checkpoint(args.checkpoint)
    pp_spec = preset_preprocess(train_cfg.preset)
    image_id, image, _, _ = _resolve_image(args, pp_spec)
    adversarial = np.load(Path(args.attack_dir) / "adversarial.npy")
    _, spec = load_target_spec(args.target_spec, model.arch.num_landmarks)
    before = predict_landmarks(model, image, codec)
    after = decode(forward(model, adversarial), codec)
    out = export_visualization(
        image, adversarial, before, after, spec, run_dir / "panel.png",
        magnification=args.magnification,
    )
    print(f"wrote {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="landmark-attack", description=__doc__)
    parser.subcommands = {}
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a detector and report held-out metrics")
    _add_dataset_flags(p_train)
    _add_common_flags(p_train)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--alpha", type=float, default=None)
    p_train.add_argument("--sigma", type=float, default=None)
    p_train.set_defaults(func=cmd_train)

    p_detect = sub.add_parser("detect", help="predict landmarks for one image")
    _add_dataset_flags(p_detect)
    _add_common_flags(p_detect)
    p_detect.add_argument("--checkpoint", type=Path, required=True)
    p_detect.add_argument("--image", type=Path, default=None)
    p_detect.add_argument("--image-id", default=None)
    p_detect.set_defaults(func=cmd_detect)

    p_attack = sub.add_parser("attack", help="generate one adversarial example")
    _add_dataset_flags(p_attack)
    _add_common_flags(p_attack)
    p_attack.add_argument("--checkpoint", type=Path, required=True)
    p_attack.add_argument("--target-spec", type=Path, required=True)
    p_attack.add_argument("--image", type=Path, default=None)
    p_attack.add_argument("--image-id", default=None)
    p_attack.add_argument("--epsilon", type=float, default=8.0)
    p_attack.add_argument("--eta", type=float, default=0.05)
    p_attack.add_argument("--iterations", type=int, default=300)
    p_attack.add_argument("--adaptive", action=argparse.BooleanOptionalAction, default=True)
    p_attack.add_argument("--trace-every", type=int, default=25)
    p_attack.add_argument("--epsilon-units", choices=("levels", "normalized"), default="levels")
    p_attack.add_argument("--eta-units", choices=("normalized", "levels"), default="normalized")
    p_attack.add_argument("--magnification", type=float, default=8.0)
    p_attack.set_defaults(func=cmd_attack)

    p_bench = sub.add_parser("benchmark", help="seeded random-target attack sweep")
    _add_dataset_flags(p_bench)
    _add_common_flags(p_bench)
    p_bench.add_argument("--checkpoint", type=Path, required=True)
    p_bench.add_argument("--images", type=int, default=0, help="cap on evaluation images (0 = all)")
    p_bench.add_argument("--attempts", type=int, default=2, help="attack attempts per image")
    p_bench.add_argument("--iterations", type=int, default=300)
    p_bench.add_argument("--trace-iterations", default="20,50,100,300")
    p_bench.add_argument("--epsilon", type=float, default=8.0)
    p_bench.add_argument("--epsilon-grid", default="1,2,4,8")
    p_bench.add_argument("--eta", type=float, default=0.05)
    p_bench.add_argument("--adaptive", action=argparse.BooleanOptionalAction, default=True)
    p_bench.add_argument("--compare", action=argparse.BooleanOptionalAction, default=True,
                         help="also run the flipped variant at the reference epsilon")
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.set_defaults(func=cmd_benchmark)

    p_iso = sub.add_parser("isolation", help="isolation-vs-error analysis of a benchmark run")
    _add_dataset_flags(p_iso)
    _add_common_flags(p_iso)
    p_iso.add_argument("--benchmark-dir", type=Path, required=True)
    p_iso.add_argument("--all-attempts", action="store_true",
                       help="use every attempt, not only ones where the landmark was targeted")
    p_iso.set_defaults(func=cmd_isolation)

    p_vis = sub.add_parser("visualize", help="re-render the attack panel from saved outputs")
    _add_dataset_flags(p_vis)
    _add_common_flags(p_vis)
    p_vis.add_argument("--checkpoint", type=Path, required=True)
    p_vis.add_argument("--attack-dir", type=Path, required=True)
    p_vis.add_argument("--target-spec", type=Path, required=True)
    p_vis.add_argument("--image", type=Path, default=None)
    p_vis.add_argument("--image-id", default=None)
    p_vis.add_argument("--magnification", type=float, default=8.0)
    p_vis.set_defaults(func=cmd_visualize)

    parser.subcommands = {
        "train": p_train,
        "detect": p_detect,
        "attack": p_attack,
        "benchmark": p_bench,
        "isolation": p_iso,
        "visualize": p_vis,
    }
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    # Pre-parse --config so the file's values become flag defaults that
    # explicit flags still override.
    preliminary, _ = parser.parse_known_args(argv)
    if getattr(preliminary, "config", None):
        config_path = Path(preliminary.config)
        if not config_path.is_file():
            parser.error(f"config file {config_path} does not exist")
        stored = json.loads(config_path.read_text())
        command = stored.pop("command", None)
        targets = (
            [parser.subcommands[command]] if command in parser.subcommands
            else parser.subcommands.values()
        )
        for sub_parser in targets:
            known = {a.dest for a in sub_parser._actions}
            sub_parser.set_defaults(**{k: v for k, v in stored.items() if k in known})
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 2 with a message
        logger.debug("fatal error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
