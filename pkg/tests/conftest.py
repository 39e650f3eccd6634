"""Shared fixtures: the desk-scale rig used by the acceptance suite.

Building the rig trains the desk detector on the synthetic dataset and runs
the attack sweeps once; every acceptance criterion then reads from it. The
whole build is seeded and deterministic.
"""

import logging

import numpy as np
import pytest

from landmark_attack.benchmark import BenchmarkConfig, run_benchmark
from landmark_attack.codec import encode
from landmark_attack.data import preprocess, synth_dataset
from landmark_attack.detector import predict_landmarks, train
from landmark_attack.metrics import radial_error
from landmark_attack.presets import preset_codec, preset_preprocess, preset_train_config
from landmark_attack.seeding import named_rng, named_seed

RIG_SEED = 0
RIG_LANDMARKS = 8
RIG_TRAIN_IMAGES = 200
RIG_TEST_IMAGES = 50
RIG_VAL_IMAGES = 20       # extra generated images steering the lr schedule
SWEEP_IMAGES = 6          # images in the epsilon/iteration sweep (x2 attempts)
COMPARE_IMAGES = 10       # images in the adaptive-vs-plain comparison (x2 attempts)
COMPARE_BUDGET = 100      # fixed iteration budget for the comparison


class DeskRig:
    def __init__(self):
        logging.getLogger("landmark_attack").setLevel(logging.WARNING)
        self.codec = preset_codec("desk")
        self.preprocess_spec = preset_preprocess("desk")
        size = (self.preprocess_spec.width, self.preprocess_spec.height)

        rng = named_rng(RIG_SEED, "dataset")
        train_records = synth_dataset(rng, RIG_TRAIN_IMAGES, RIG_LANDMARKS, size, split="train")
        test_records = synth_dataset(rng, RIG_TEST_IMAGES, RIG_LANDMARKS, size, split="test1")
        val_records = synth_dataset(rng, RIG_VAL_IMAGES, RIG_LANDMARKS, size, split="val")

        pairs = []
        for rec in train_records:
            image, lms = preprocess(rec, self.preprocess_spec)
            pairs.append((image, encode(lms, image.shape[-2:], self.codec)))
        val_items = [preprocess(rec, self.preprocess_spec) for rec in val_records]
        self.train_config = preset_train_config("desk", seed=named_seed(RIG_SEED, "training"))
        self.model = train(pairs, self.train_config, val_dataset=val_items)

        self.test_items = [
            (rec.image_id, *preprocess(rec, self.preprocess_spec)) for rec in test_records
        ]

        self.detection_errors = np.concatenate(
            [
                radial_error(predict_landmarks(self.model, image, self.codec), gt)
                for _, image, gt in self.test_items
            ]
        )

        sweep_items = self.test_items[:SWEEP_IMAGES]
        self.sweep_config = BenchmarkConfig(
            iterations=300,
            trace_iterations=(20, 50, 100, 300),
            epsilon=8.0,
            epsilon_grid=(1.0, 2.0, 4.0, 8.0),
            adaptive=True,
            compare_variants=False,
            attempts_per_image=2,
            seed=RIG_SEED,
        )
        self.sweep = run_benchmark(self.model, sweep_items, self.codec, self.sweep_config)

        compare_items = self.test_items[:COMPARE_IMAGES]
        self.compare_config = BenchmarkConfig(
            iterations=COMPARE_BUDGET,
            trace_iterations=(20, 50, 100),
            epsilon=8.0,
            epsilon_grid=(8.0,),
            adaptive=True,
            compare_variants=True,
            attempts_per_image=2,
            seed=RIG_SEED + 1,
        )
        self.compare = run_benchmark(self.model, compare_items, self.codec, self.compare_config)

        self.ground_truth = [rec.landmarks for rec in test_records]


@pytest.fixture(scope="session")
def desk_rig():
    return DeskRig()
