"""Multi-task U-Net landmark detector.

The network maps a normalized image to 3K channels: K sigmoid heatmaps
followed by K x-offset and K y-offset channels. The per-landmark loss is a
binary cross-entropy on the heatmap plus an L1 on the offsets restricted to
the heatmap support. Input gradients for the attack engine come from
autograd against a frozen model.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import CodecConfig, LandmarkSet, MapStack, decode
from .data import match_channels

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Encoder-decoder shape: channel widths double at each of `depth` levels."""

    in_channels: int = 3
    num_landmarks: int = 19
    base_channels: int = 64
    depth: int = 4
    norm: str = "batch"  # "batch" | "none"

    def __post_init__(self) -> None:
        if min(self.in_channels, self.num_landmarks, self.base_channels, self.depth) < 1:
            raise ValueError(f"invalid architecture spec: {self}")
        if self.norm not in ("batch", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def out_channels(self) -> int:
        return 3 * self.num_landmarks


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0            # heatmap loss weight
    learning_rate: float = 1e-3
    lr_decay: float = 0.1
    lr_step_epochs: int = 100
    epochs: int = 230
    batch_size: int = 8
    sigma: float = 40.0
    preset: str = "full"
    seed: int = 0
    # Optional validation-driven schedule (desk preset): when a validation
    # set is supplied, decay the learning rate once validation MRE reaches
    # `decay_on_val_mre` and stop once it reaches `early_stop_mre`; `epochs`
    # stays the hard cap. Zero disables each hook.
    val_every: int = 0
    decay_on_val_mre: float = 0.0
    early_stop_mre: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class LossBreakdown:
    """Total loss plus its per-landmark decomposition."""

    total: float
    per_landmark: np.ndarray   # (K,)
    heatmap_terms: np.ndarray  # (K,) unweighted BCE per landmark
    offset_terms: np.ndarray   # (K,) masked L1 per landmark


class _DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, norm: str = "batch"):
        super().__init__()
        layers = []
        for cin in (in_channels, out_channels):
            layers.append(nn.Conv2d(cin, out_channels, 3, padding=1))
            if norm == "batch":
                layers.append(nn.BatchNorm2d(out_channels))
            layers.append(nn.ReLU(inplace=True))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiTaskUNet(nn.Module):
    """U-Net with a 3K-channel head; heatmaps sigmoid, offsets linear."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        widths = [arch.base_channels * 2**i for i in range(arch.depth + 1)]
        self.encoders = nn.ModuleList()
        c = arch.in_channels
        for w in widths[:-1]:
            self.encoders.append(_DoubleConv(c, w, arch.norm))
            c = w
        self.bottleneck = _DoubleConv(widths[-2], widths[-1], arch.norm)
        c = widths[-1]
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.upsamplers.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.decoders.append(_DoubleConv(2 * w, w, arch.norm))
            c = w
        self.head = nn.Conv2d(c, arch.out_channels, 1)
        # Start the heatmap logits near the background prior so early training
        # is not spent suppressing the (overwhelming) negative pixels.
        with torch.no_grad():
            self.head.bias[: arch.num_landmarks].fill_(-4.0)

    def forward_raw(self, x: torch.Tensor) -> torch.Tensor:
        """3K channels with the heatmap slots still as logits.

        Training and attack gradients flow through this head: pairing the
        logits with a with-logits cross-entropy keeps gradients alive even
        when the sigmoid saturates to exactly 0/1 in float32.
        """
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ValueError(
                f"expected (B, {self.arch.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        factor = 2**self.arch.depth
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(
                f"input height/width must be divisible by {factor}, got {tuple(x.shape[-2:])}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.forward_raw(x)
        k = self.arch.num_landmarks
        return torch.cat([torch.sigmoid(raw[:, :k]), raw[:, k:]], dim=1)


def image_to_tensor(image: np.ndarray, model: MultiTaskUNet) -> torch.Tensor:
    """Normalized numpy image -> (C, H, W) tensor in the model's dtype."""
    arr = match_channels(np.asarray(image), model.arch.in_channels)
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def landmark_loss_terms(
    pred: torch.Tensor, target: torch.Tensor, alpha: float = 1.0, heat_logits: bool = False
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-landmark losses for (..., 3K, H, W) stacks; returns (..., K) tensors.

    Heatmap term: pixel-mean binary cross-entropy (computed from logits when
    `heat_logits` is set, which is the numerically stable path used for
    training and attack gradients). Offset term: L1 restricted to the target
    heatmap support (x and y summed), averaged over the mask pixel count. A
    landmark whose target heatmap is identically zero contributes no offset
    term.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.shape[-3] % 3:
        raise ValueError(f"channel count {pred.shape[-3]} is not a multiple of 3")
    k = pred.shape[-3] // 3
    heat_p, off_xp, off_yp = pred[..., :k, :, :], pred[..., k : 2 * k, :, :], pred[..., 2 * k :, :, :]
    heat_t, off_xt, off_yt = target[..., :k, :, :], target[..., k : 2 * k, :, :], target[..., 2 * k :, :, :]

    if heat_logits:
        bce = F.binary_cross_entropy_with_logits(heat_p, heat_t, reduction="none").mean(dim=(-2, -1))
    else:
        bce = F.binary_cross_entropy(heat_p, heat_t, reduction="none").mean(dim=(-2, -1))
    mask = (heat_t > 0).to(pred.dtype)
    count = mask.sum(dim=(-2, -1)).clamp(min=1.0)
    l1 = (mask * (off_xp - off_xt).abs()).sum(dim=(-2, -1))
    l1 = l1 + (mask * (off_yp - off_yt).abs()).sum(dim=(-2, -1))
    offset = l1 / count
    return alpha * bce + offset, bce, offset


def loss(pred: MapStack, target: MapStack, alpha: float = 1.0) -> LossBreakdown:
    """Eq.-style loss between two map stacks, with per-landmark breakdown."""
    pred_t = torch.from_numpy(pred.channels().astype(np.float64))
    target_t = torch.from_numpy(target.channels().astype(np.float64))
    total_i, bce, offset = landmark_loss_terms(pred_t, target_t, alpha)
    per = total_i.numpy()
    return LossBreakdown(
        total=float(per.sum()),
        per_landmark=per,
        heatmap_terms=bce.numpy(),
        offset_terms=offset.numpy(),
    )


def forward(model: MultiTaskUNet, image: np.ndarray) -> MapStack:
    """Inference-mode forward pass returning a numpy MapStack."""
    model.eval()
    with torch.no_grad():
        out = model(image_to_tensor(image, model)[None])[0]
    return MapStack.from_channels(out.cpu().numpy(), model.arch.num_landmarks)


def predict_landmarks(model: MultiTaskUNet, image: np.ndarray, codec: CodecConfig) -> LandmarkSet:
    """Forward pass followed by majority-vote decoding."""
    return decode(forward(model, image), codec)


def input_gradient(
    model: MultiTaskUNet,
    image: np.ndarray,
    target: MapStack | np.ndarray,
    weights=None,
    alpha: float = 1.0,
) -> np.ndarray:
    """Exact gradient of sum_j weights_j * L_j with respect to input pixels.

    Model parameters are left untouched. The returned array mirrors the
    input's shape; if a grayscale image was replicated to feed a
    multi-channel model, channel gradients are summed back.
    """
    model.eval()
    x = image_to_tensor(image, model).requires_grad_(True)
    channels = target.channels() if isinstance(target, MapStack) else np.asarray(target)
    target_t = torch.from_numpy(np.ascontiguousarray(channels)).to(x.dtype)
    terms, _, _ = landmark_loss_terms(
        model.forward_raw(x[None])[0], target_t, alpha, heat_logits=True
    )
    if weights is None:
        w = torch.ones_like(terms)
    else:
        w = torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=x.dtype)
        if w.shape != terms.shape:
            raise ValueError(f"expected {terms.shape[0]} weights, got {tuple(w.shape)}")
    (grad,) = torch.autograd.grad((w * terms).sum(), x)
    grad = grad.detach().cpu().numpy()

    image = np.asarray(image)
    if image.ndim == 2:
        return grad.sum(axis=0)
    if image.shape[0] == 1 and grad.shape[0] > 1:
        return grad.sum(axis=0, keepdims=True)
    return grad


def train(
    dataset,
    config: TrainConfig,
    arch: ArchSpec | None = None,
    val_dataset=None,
    checkpoint_path=None,
) -> MultiTaskUNet:
    """Train a detector on (normalized image, MapStack target) pairs.

    Adam with a step learning-rate schedule; the batch loss is the mean over
    samples of the summed per-landmark losses. Raises RuntimeError if the
    loss stops being finite.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    first_img, first_target = dataset[0]
    if arch is None:
        from .presets import preset_arch

        in_ch = 1 if np.asarray(first_img).ndim == 2 else np.asarray(first_img).shape[0]
        arch = preset_arch(config.preset, first_target.num_landmarks, in_channels=in_ch)

    torch.manual_seed(config.seed)
    model = MultiTaskUNet(arch)
    if config.epochs == 0:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, config, CodecConfig(sigma=config.sigma))
        return model

    images = torch.stack(
        [torch.from_numpy(match_channels(np.asarray(img, np.float32), arch.in_channels)) for img, _ in dataset]
    )
    targets = torch.stack([torch.from_numpy(maps.channels().astype(np.float32)) for _, maps in dataset])

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(config.seed)
    n = len(dataset)
    codec = CodecConfig(sigma=config.sigma)

    def val_mre() -> float:
        model.eval()
        errs = [
            np.hypot(*(predict_landmarks(model, img, codec).as_array() - lms.as_array()).T).mean()
            for img, lms in val_dataset
        ]
        return float(np.mean(errs))

    adaptive_schedule = bool(val_dataset) and config.val_every > 0
    decayed = not adaptive_schedule

    model.train()
    for epoch in range(config.epochs):
        if not adaptive_schedule and epoch and epoch % config.lr_step_epochs == 0:
            for group in optimizer.param_groups:
                group["lr"] *= config.lr_decay
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        model.train()
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad()
            terms, _, _ = landmark_loss_terms(
                model.forward_raw(images[idx]), targets[idx], config.alpha, heat_logits=True
            )
            batch_loss = terms.sum(dim=1).mean()
            if not torch.isfinite(batch_loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"batch starting at sample {start}"
                )
            batch_loss.backward()
            optimizer.step()
            epoch_loss += float(batch_loss.detach()) * len(idx)
        logger.info("epoch %d/%d  loss %.5f", epoch + 1, config.epochs, epoch_loss / n)

        if adaptive_schedule and (epoch + 1) % config.val_every == 0:
            mre = val_mre()
            logger.info("epoch %d validation MRE %.3f px", epoch + 1, mre)
            if not decayed and config.decay_on_val_mre and mre <= config.decay_on_val_mre:
                for group in optimizer.param_groups:
                    group["lr"] *= config.lr_decay
                decayed = True
                logger.info("validation MRE reached %.2f px, decaying learning rate", mre)
            if decayed and config.early_stop_mre and mre <= config.early_stop_mre:
                logger.info("early stop at epoch %d (validation MRE %.3f px)", epoch + 1, mre)
                break

    model.eval()
    if val_dataset:
        logger.info("final validation MRE: %.3f px", val_mre())

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, config, codec)
    return model


def save_checkpoint(path, model: MultiTaskUNet, train_config: TrainConfig, codec: CodecConfig) -> None:
    """Persist a self-describing, versioned checkpoint."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": asdict(model.arch),
        "state_dict": model.state_dict(),
        "train_config": asdict(train_config),
        "codec": asdict(codec),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[MultiTaskUNet, TrainConfig, CodecConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    model = MultiTaskUNet(ArchSpec(**payload["arch"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, TrainConfig(**payload["train_config"]), CodecConfig(**payload["codec"])


def load_pretrained_encoder(model: MultiTaskUNet, state_dict: dict, strict: bool = False) -> list[str]:
    """Optional hook: copy matching encoder weights from an external state dict.

    Returns the parameter names that were loaded. Shapes must match; under
    `strict`, any encoder parameter without a source raises.
    """
    own = model.state_dict()
    loaded = []
    for name, value in state_dict.items():
        if name in own and own[name].shape == value.shape and (
            name.startswith("encoders") or name.startswith("bottleneck")
        ):
            own[name] = value
            loaded.append(name)
    if strict:
        missing = [
            n for n in own if (n.startswith("encoders") or n.startswith("bottleneck")) and n not in loaded
        ]
        if missing:
            raise ValueError(f"no pretrained weights for encoder parameters: {missing[:5]}")
    model.load_state_dict(own)
    return loaded
