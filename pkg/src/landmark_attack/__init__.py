"""Heatmap/offset landmark detection and targeted adversarial attacks."""

from .attack import (
    AttackConfig,
    AttackDiverged,
    AttackResult,
    TargetSpec,
    TargetedLandmark,
    TracePoint,
    adaptive_weights,
    build_adversarial_targets,
    default_target_rect,
    fgsm_step,
    load_target_spec,
    perturbation_within_budget,
    random_target_spec,
    run_attack,
    save_target_spec,
)
from .benchmark import BenchmarkConfig, BenchmarkResult, SweepRecord, run_benchmark
from .codec import (
    FRAME_ORIGINAL,
    FRAME_RESIZED,
    CodecConfig,
    LandmarkSet,
    MapStack,
    decode,
    encode,
)
from .data import (
    DatasetRecord,
    PreprocessSpec,
    export_visualization,
    load_dataset,
    load_isbi,
    preprocess,
    save_dataset,
    synth_dataset,
)
from .detector import (
    ArchSpec,
    LossBreakdown,
    MultiTaskUNet,
    TrainConfig,
    forward,
    input_gradient,
    load_checkpoint,
    loss,
    predict_landmarks,
    save_checkpoint,
    train,
)
from .metrics import (
    ErrorRecord,
    ErrorSummary,
    EvalReport,
    IsolationReport,
    aggregate,
    isolation_degree,
    isolation_vs_error,
    radial_error,
)
from .presets import preset_arch, preset_codec, preset_preprocess, preset_train_config

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "AttackConfig",
    "AttackDiverged",
    "AttackResult",
    "BenchmarkConfig",
    "BenchmarkResult",
    "CodecConfig",
    "DatasetRecord",
    "ErrorRecord",
    "ErrorSummary",
    "EvalReport",
    "FRAME_ORIGINAL",
    "FRAME_RESIZED",
    "IsolationReport",
    "LandmarkSet",
    "LossBreakdown",
    "MapStack",
    "MultiTaskUNet",
    "PreprocessSpec",
    "SweepRecord",
    "TargetSpec",
    "TargetedLandmark",
    "TracePoint",
    "TrainConfig",
    "adaptive_weights",
    "aggregate",
    "build_adversarial_targets",
    "decode",
    "default_target_rect",
    "encode",
    "export_visualization",
    "fgsm_step",
    "forward",
    "input_gradient",
    "isolation_degree",
    "isolation_vs_error",
    "load_checkpoint",
    "load_dataset",
    "load_isbi",
    "load_target_spec",
    "loss",
    "perturbation_within_budget",
    "predict_landmarks",
    "preprocess",
    "preset_arch",
    "preset_codec",
    "preset_preprocess",
    "preset_train_config",
    "radial_error",
    "random_target_spec",
    "run_attack",
    "run_benchmark",
    "save_checkpoint",
    "save_dataset",
    "save_target_spec",
    "synth_dataset",
    "train",
    "__version__",
]
