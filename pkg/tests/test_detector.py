"""Tests for the multi-task detector: loss, gradients, training, checkpoints."""

import math

import numpy as np
import pytest
import torch

from landmark_attack.codec import CodecConfig, LandmarkSet, MapStack, decode, encode
from landmark_attack.detector import (
    ArchSpec,
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

TINY_ARCH = ArchSpec(in_channels=1, num_landmarks=2, base_channels=4, depth=2)


def tiny_model(seed=0, arch=TINY_ARCH):
    torch.manual_seed(seed)
    return MultiTaskUNet(arch).eval()


def single_pixel_stack(h, ox, oy):
    return MapStack(
        np.array([[[h]]], dtype=np.float64),
        np.array([[[ox]]], dtype=np.float64),
        np.array([[[oy]]], dtype=np.float64),
    )


class TestLoss:
    def test_single_pixel_hand_computation(self):
        # alpha=1, target h=1 / pred h=0.5, target offsets (0.2, -0.1), pred (0, 0):
        # L = -ln(0.5) + 0.2 + 0.1
        target = single_pixel_stack(1.0, 0.2, -0.1)
        pred = single_pixel_stack(0.5, 0.0, 0.0)
        out = loss(pred, target, alpha=1.0)
        assert out.total == pytest.approx(-math.log(0.5) + 0.3, rel=1e-9)
        assert out.heatmap_terms[0] == pytest.approx(-math.log(0.5), rel=1e-9)
        assert out.offset_terms[0] == pytest.approx(0.3, rel=1e-9)

    def test_identical_prediction_minimizes(self):
        config = CodecConfig(sigma=5.0)
        maps = encode(LandmarkSet(((10.0, 12.0), (20.0, 8.0))), (32, 32), config)
        # Keep heatmaps strictly inside (0,1) so BCE stays finite.
        pred = maps.copy()
        pred.heatmaps = np.clip(pred.heatmaps, 1e-6, 1 - 1e-6)
        target = pred.copy()
        out = loss(pred, target)
        assert np.all(out.offset_terms == 0)
        # BCE at its minimum: the target's own entropy.
        h = target.heatmaps.astype(np.float64)
        entropy = -(h * np.log(h) + (1 - h) * np.log1p(-h)).mean(axis=(1, 2))
        assert out.heatmap_terms == pytest.approx(entropy, rel=1e-9)

    def test_zero_target_heatmap_masks_offsets(self):
        target = MapStack(
            np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((1, 4, 4))
        )
        pred = MapStack(
            np.full((1, 4, 4), 0.3),
            np.full((1, 4, 4), 5.0),
            np.full((1, 4, 4), -7.0),
        )
        out = loss(pred, target)
        assert out.offset_terms[0] == 0.0

    def test_decomposition_and_nonnegativity(self):
        rng = np.random.default_rng(2)
        k = 4
        target = MapStack(
            rng.uniform(0, 1, (k, 8, 8)),
            rng.normal(0, 0.5, (k, 8, 8)),
            rng.normal(0, 0.5, (k, 8, 8)),
        )
        pred = MapStack(
            rng.uniform(0.01, 0.99, (k, 8, 8)),
            rng.normal(0, 0.5, (k, 8, 8)),
            rng.normal(0, 0.5, (k, 8, 8)),
        )
        out = loss(pred, target)
        assert out.total == pytest.approx(out.per_landmark.sum(), rel=1e-9)
        assert np.all(out.per_landmark >= 0)
        assert np.all(out.offset_terms >= 0)

    def test_shape_mismatch_rejected(self):
        a = single_pixel_stack(0.5, 0.0, 0.0)
        b = MapStack(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))
        with pytest.raises(ValueError):
            loss(a, b)


class TestForward:
    def test_output_shape_and_sigmoid_range(self):
        model = tiny_model()
        maps = forward(model, np.zeros((16, 16), dtype=np.float32))
        assert maps.num_landmarks == 2
        assert maps.heatmaps.shape == (2, 16, 16)
        assert np.all(maps.heatmaps > 0) and np.all(maps.heatmaps < 1)

    def test_deterministic(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
        a = forward(model, img)
        b = forward(model, img)
        assert np.array_equal(a.channels(), b.channels())

    def test_shape_mismatch_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="divisible"):
            forward(model, np.zeros((15, 15), dtype=np.float32))
        with pytest.raises(ValueError):
            model(torch.zeros(1, 3, 16, 16))

    def test_predict_is_forward_then_decode(self):
        model = tiny_model()
        codec = CodecConfig(sigma=4.0)
        rng = np.random.default_rng(1)
        img = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
        assert predict_landmarks(model, img, codec).points == decode(forward(model, img), codec).points


class TestInputGradient:
    def setup_method(self):
        self.model = tiny_model(seed=3).double()
        self.codec = CodecConfig(sigma=3.0)
        rng = np.random.default_rng(5)
        self.image = rng.uniform(-0.9, 0.9, (16, 16))
        self.target = encode(
            LandmarkSet(((5.0, 6.0), (11.0, 10.0))), (16, 16), self.codec
        )

    def weighted_total(self, image, weights):
        out = loss(forward(self.model, image), self.target)
        return float(np.dot(weights, out.per_landmark))

    def test_matches_central_finite_differences(self):
        weights = np.array([1.3, 0.7])
        grad = input_gradient(self.model, self.image, self.target, weights)
        assert grad.shape == self.image.shape
        rng = np.random.default_rng(7)
        h = 1e-5
        checked = 0
        for _ in range(160):
            y, x = rng.integers(0, 16, size=2)
            bumped = self.image.copy()
            bumped[y, x] += h
            up = self.weighted_total(bumped, weights)
            bumped[y, x] -= 2 * h
            down = self.weighted_total(bumped, weights)
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(grad[y, x]))
            if scale < 1e-6:
                # Below the finite-difference noise floor: absolute agreement.
                assert abs(fd - grad[y, x]) <= 1e-9
                continue
            assert abs(fd - grad[y, x]) / scale <= 1e-3
            checked += 1
        assert checked >= 100

    def test_zero_weights_zero_gradient(self):
        grad = input_gradient(self.model, self.image, self.target, np.zeros(2))
        assert np.all(grad == 0)

    def test_doubling_weights_doubles_gradient(self):
        w = np.array([0.5, 2.0])
        g1 = input_gradient(self.model, self.image, self.target, w)
        g2 = input_gradient(self.model, self.image, self.target, 2 * w)
        assert g2 == pytest.approx(2 * g1, rel=1e-9)

    def test_parameters_untouched(self):
        before = [p.detach().clone() for p in self.model.parameters()]
        input_gradient(self.model, self.image, self.target, np.ones(2))
        for p, b in zip(self.model.parameters(), before):
            assert torch.equal(p, b)
        assert all(p.grad is None for p in self.model.parameters())


def make_desk_dataset(n, size=32, k=2, sigma=3.0, seed=0):
    """Tiny images with bright blobs at known positions."""
    rng = np.random.default_rng(seed)
    codec = CodecConfig(sigma=sigma)
    pairs = []
    landmark_sets = []
    for _ in range(n):
        img = rng.uniform(-1, -0.8, (size, size)).astype(np.float32)
        pts = []
        for i in range(k):
            x = float(rng.integers(6, size - 6))
            y = float(rng.integers(6, size - 6))
            # square blob for landmark 0, cross for landmark 1
            xi, yi = int(x), int(y)
            if i == 0:
                img[yi - 2 : yi + 3, xi - 2 : xi + 3] = 1.0
            else:
                img[yi, xi - 3 : xi + 4] = 1.0
                img[yi - 3 : yi + 4, xi] = 1.0
            pts.append((x, y))
        lms = LandmarkSet(tuple(pts))
        pairs.append((img, encode(lms, (size, size), codec)))
        landmark_sets.append(lms)
    return pairs, landmark_sets, codec


class TestTrain:
    def test_zero_epochs_returns_seeded_init(self):
        pairs, _, _ = make_desk_dataset(2)
        config = TrainConfig(preset="desk", epochs=0, sigma=3.0, seed=9)
        arch = ArchSpec(in_channels=1, num_landmarks=2, base_channels=4, depth=2)
        model = train(pairs, config, arch=arch)
        torch.manual_seed(9)
        reference = MultiTaskUNet(arch)
        for p, q in zip(model.parameters(), reference.parameters()):
            assert torch.equal(p, q)

    def test_short_training_reduces_loss(self):
        pairs, _, _ = make_desk_dataset(8, seed=1)
        arch = ArchSpec(in_channels=1, num_landmarks=2, base_channels=4, depth=2)
        # Long enough for the BatchNorm running statistics to settle.
        config = TrainConfig(
            preset="desk", epochs=20, batch_size=4, sigma=3.0, seed=0, lr_step_epochs=50
        )
        model0 = train(pairs, TrainConfig(preset="desk", epochs=0, sigma=3.0, seed=0), arch=arch)
        model = train(pairs, config, arch=arch)

        def mean_loss(m):
            total = 0.0
            for img, maps in pairs:
                total += loss(forward(m, img), maps).total
            return total / len(pairs)

        assert mean_loss(model) < mean_loss(model0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(preset="desk"))

    def test_full_preset_defaults(self):
        config = TrainConfig()
        assert config.batch_size == 8
        assert config.epochs == 230
        assert config.learning_rate == 1e-3
        assert config.lr_decay == 0.1
        assert config.lr_step_epochs == 100
        assert config.alpha == 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = tiny_model(seed=4)
        config = TrainConfig(preset="desk", epochs=3, sigma=3.0)
        codec = CodecConfig(sigma=3.0)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, config, codec)
        loaded, config2, codec2 = load_checkpoint(path)
        assert config2 == config
        assert codec2 == codec
        assert loaded.arch == model.arch
        img = np.zeros((16, 16), dtype=np.float32)
        assert np.array_equal(forward(loaded, img).channels(), forward(model, img).channels())

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"format_version": 99}, path)
        with pytest.raises(ValueError, match="format version"):
            load_checkpoint(path)
