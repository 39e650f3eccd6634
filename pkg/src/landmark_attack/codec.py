"""Landmark <-> heatmap/offset-map conversion.

A landmark at (x, y) is represented by a Gaussian heatmap truncated to zero
below a threshold, plus a pair of coordinate offset maps storing
(pixel - landmark) / sigma inside the surviving disk. Decoding runs a
majority vote: every above-threshold pixel proposes the landmark position
implied by its offsets, and the position with the most votes wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRAME_ORIGINAL = "original"
FRAME_RESIZED = "resized"
_FRAMES = (FRAME_ORIGINAL, FRAME_RESIZED)


@dataclass(frozen=True)
class CodecConfig:
    """Gaussian width (pixels) and truncation threshold of the map encoding."""

    sigma: float = 40.0
    threshold: float = 0.6

    def __post_init__(self) -> None:
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def mask_radius(self) -> float:
        """Radius in pixels of the disk on which the truncated maps are nonzero."""
        return self.sigma * math.sqrt(-2.0 * math.log(self.threshold))


@dataclass(frozen=True)
class LandmarkSet:
    """An ordered set of 2-D landmarks, (x, y) = (column, row) in pixels.

    `frame` declares which pixel grid the coordinates live in: the original
    image resolution or the resized resolution fed to the network.
    """

    points: tuple[tuple[float, float], ...]
    frame: str = FRAME_RESIZED

    def __post_init__(self) -> None:
        if self.frame not in _FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}, expected one of {_FRAMES}")
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if any(not (math.isfinite(x) and math.isfinite(y)) for x, y in pts):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def num_landmarks(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        """Coordinates as a (K, 2) float64 array of (x, y) pairs."""
        return np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @classmethod
    def from_array(cls, arr, frame: str = FRAME_RESIZED) -> "LandmarkSet":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 2)
        return cls(tuple((float(x), float(y)) for x, y in arr), frame=frame)


@dataclass
class MapStack:
    """Per-landmark heatmap and x/y offset channels over a common H x W grid.

    Ground-truth stacks produced by :func:`encode` are zero in all three
    channels wherever the untruncated Gaussian falls below the threshold.
    """

    heatmaps: np.ndarray   # (K, H, W), values in [0, 1]
    offsets_x: np.ndarray  # (K, H, W), (x - x_i) / sigma inside the mask
    offsets_y: np.ndarray  # (K, H, W), (y - y_i) / sigma inside the mask

    def __post_init__(self) -> None:
        shapes = {self.heatmaps.shape, self.offsets_x.shape, self.offsets_y.shape}
        if len(shapes) != 1 or self.heatmaps.ndim != 3:
            raise ValueError(
                "heatmaps/offsets_x/offsets_y must share one (K, H, W) shape, got "
                f"{self.heatmaps.shape}, {self.offsets_x.shape}, {self.offsets_y.shape}"
            )

    @property
    def num_landmarks(self) -> int:
        return self.heatmaps.shape[0]

    @property
    def height(self) -> int:
        return self.heatmaps.shape[1]

    @property
    def width(self) -> int:
        return self.heatmaps.shape[2]

    def channels(self) -> np.ndarray:
        """Stack as (3K, H, W): K heatmaps, then K x-offsets, then K y-offsets."""
        return np.concatenate([self.heatmaps, self.offsets_x, self.offsets_y], axis=0)

    @classmethod
    def from_channels(cls, channels, num_landmarks: int) -> "MapStack":
        channels = np.asarray(channels)
        if channels.ndim != 3 or channels.shape[0] != 3 * num_landmarks:
            raise ValueError(
                f"expected ({3 * num_landmarks}, H, W) channels, got {channels.shape}"
            )
        k = num_landmarks
        return cls(
            heatmaps=channels[:k].copy(),
            offsets_x=channels[k : 2 * k].copy(),
            offsets_y=channels[2 * k :].copy(),
        )

    def copy(self) -> "MapStack":
        return MapStack(self.heatmaps.copy(), self.offsets_x.copy(), self.offsets_y.copy())


def encode(landmarks: LandmarkSet, shape: tuple[int, int], config: CodecConfig) -> MapStack:
    """Render landmarks into truncated Gaussian heatmaps plus offset maps.

    Args:
        landmarks: points in the pixel grid of `shape`.
        shape: (height, width) of the output maps.
        config: Gaussian width and truncation threshold.

    Returns:
        A MapStack where channel i holds exp(-d^2 / (2 sigma^2)) at pixels
        whose value reaches the threshold, and the offset channels hold the
        sigma-normalized displacement from the landmark on the same support.

    Raises:
        ValueError: if any landmark falls outside the image bounds.
    """
    height, width = int(shape[0]), int(shape[1])
    k = landmarks.num_landmarks
    heat = np.zeros((k, height, width), dtype=np.float32)
    off_x = np.zeros_like(heat)
    off_y = np.zeros_like(heat)
    reach = config.mask_radius + 1.0
    inv_two_sigma_sq = 1.0 / (2.0 * config.sigma * config.sigma)

    for i, (x, y) in enumerate(landmarks.points):
        if not (0.0 <= x < width and 0.0 <= y < height):
            raise ValueError(
                f"landmark {i} at ({x}, {y}) lies outside a {width}x{height} image"
            )
        x0 = max(0, int(math.floor(x - reach)))
        x1 = min(width, int(math.ceil(x + reach)) + 1)
        y0 = max(0, int(math.floor(y - reach)))
        y1 = min(height, int(math.ceil(y + reach)) + 1)
        xs = np.arange(x0, x1, dtype=np.float64) - x
        ys = np.arange(y0, y1, dtype=np.float64) - y
        sq = ys[:, None] ** 2 + xs[None, :] ** 2
        gauss = np.exp(-sq * inv_two_sigma_sq)
        mask = gauss >= config.threshold
        heat[i, y0:y1, x0:x1] = np.where(mask, gauss, 0.0).astype(np.float32)
        off_x[i, y0:y1, x0:x1] = np.where(mask, xs[None, :] / config.sigma, 0.0).astype(np.float32)
        off_y[i, y0:y1, x0:x1] = np.where(mask, ys[:, None] / config.sigma, 0.0).astype(np.float32)

    return MapStack(heat, off_x, off_y)


def _round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, halves away from zero."""
    return np.copysign(np.floor(np.abs(values) + 0.5), values).astype(np.int64)


def _decode_channel(
    heat: np.ndarray, off_x: np.ndarray, off_y: np.ndarray, config: CodecConfig
) -> tuple[float, float]:
    height, width = heat.shape
    ys, xs = np.nonzero(heat >= config.threshold)
    if ys.size == 0:
        # No candidate pixels: fall back to the heatmap maximum so that decode
        # stays total on badly perturbed maps.
        flat = int(np.argmax(heat))
        return float(flat % width), float(flat // width)

    vote_x = _round_half_away(xs - config.sigma * off_x[ys, xs].astype(np.float64))
    vote_y = _round_half_away(ys - config.sigma * off_y[ys, xs].astype(np.float64))
    inside = (vote_x >= 0) & (vote_x < width) & (vote_y >= 0) & (vote_y < height)
    if not inside.any():
        flat = int(np.argmax(heat))
        return float(flat % width), float(flat // width)

    flat_votes = vote_y[inside] * width + vote_x[inside]
    weights = heat[ys, xs][inside].astype(np.float64)
    counts = np.bincount(flat_votes, minlength=height * width)
    weight_sums = np.bincount(flat_votes, weights=weights, minlength=height * width)

    best = np.nonzero(counts == counts.max())[0]
    if best.size > 1:
        best = best[weight_sums[best] == weight_sums[best].max()]
    winner = int(best.min())  # row-major order breaks any remaining tie
    return float(winner % width), float(winner // width)


def decode(maps: MapStack, config: CodecConfig, frame: str = FRAME_RESIZED) -> LandmarkSet:
    """Majority-vote decoding of a map stack back to landmark positions.

    Every pixel whose heatmap value reaches the threshold casts a vote at the
    rounded position (x - sigma * off_x, y - sigma * off_y); votes landing
    outside the image are discarded. The most-voted position wins; ties go
    first to the position with the larger summed heatmap value over its
    voters, then to row-major order. A channel with no candidate pixels (or
    whose votes all land off-image) falls back to its heatmap argmax.
    """
    points = [
        _decode_channel(
            maps.heatmaps[i].astype(np.float64, copy=False),
            maps.offsets_x[i],
            maps.offsets_y[i],
            config,
        )
        for i in range(maps.num_landmarks)
    ]
    return LandmarkSet(tuple(points), frame=frame)
