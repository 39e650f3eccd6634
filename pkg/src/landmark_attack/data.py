"""Dataset ingestion, preprocessing, synthetic data generation, and exports.

The ISBI cephalometric layout is image files plus one annotation file per
image and per annotating doctor; ground truth is the mean of the two
annotations. The synthetic generator builds small images with visually
distinctive structures at known centers, including one tightly clustered
triple so that neighborhood-coupling analyses have something to find.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .codec import FRAME_ORIGINAL, FRAME_RESIZED, LandmarkSet

ISBI_WIDTH = 1935
ISBI_HEIGHT = 2400
ISBI_SPACING_MM = 0.1
ISBI_NUM_LANDMARKS = 19
# Per-axis scale mapping the 640x800 network frame back to original pixels.
ISBI_FRAME_SCALE = (ISBI_WIDTH / 640.0, ISBI_HEIGHT / 800.0)

SPLIT_TRAIN = "train"
SPLIT_TEST1 = "test1"
SPLIT_TEST2 = "test2"


@dataclass
class DatasetRecord:
    image_id: str
    image: np.ndarray  # uint8, (H, W) grayscale or (H, W, 3) RGB
    landmarks: LandmarkSet  # original frame
    split: str


@dataclass(frozen=True)
class PreprocessSpec:
    """Target network resolution; normalization maps uint8 to [-1, 1]."""

    width: int = 640
    height: int = 800

    def scale_for(self, original_width: int, original_height: int) -> tuple[float, float]:
        return self.width / original_width, self.height / original_height


def normalize_image(arr: np.ndarray) -> np.ndarray:
    """Affine map of 8-bit intensities to [-1, 1] (0 -> -1, 255 -> +1)."""
    return (np.asarray(arr, dtype=np.float32) / 127.5) - 1.0


def denormalize_image(arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_image`, rounded back to uint8."""
    levels = (np.asarray(arr, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.round(levels), 0, 255).astype(np.uint8)


def match_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Adapt a (H, W) or (C, H, W) float image to the requested channel count.

    Grayscale inputs are replicated when the model expects more channels;
    multi-channel inputs asked down to one channel are averaged.
    """
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {image.shape}")
    have = image.shape[0]
    if have == channels:
        return image
    if have == 1:
        return np.repeat(image, channels, axis=0)
    if channels == 1:
        return image.mean(axis=0, keepdims=True, dtype=image.dtype)
    raise ValueError(f"cannot adapt {have}-channel image to {channels} channels")


def preprocess(record: DatasetRecord, spec: PreprocessSpec) -> tuple[np.ndarray, LandmarkSet]:
    """Resize (bilinear) and normalize an image; rescale its landmarks.

    Returns a (C, H, W) float32 image in [-1, 1] and the landmark set in the
    resized frame.
    """
    img = record.image
    oh, ow = img.shape[:2]
    if (ow, oh) != (spec.width, spec.height):
        resized = Image.fromarray(img).resize((spec.width, spec.height), Image.BILINEAR)
        img = np.asarray(resized)
    norm = normalize_image(img)
    if norm.ndim == 2:
        norm = norm[None]
    else:
        norm = np.transpose(norm, (2, 0, 1))
    sx, sy = spec.scale_for(ow, oh)
    pts = tuple((x * sx, y * sy) for x, y in record.landmarks.points)
    return np.ascontiguousarray(norm), LandmarkSet(pts, frame=FRAME_RESIZED)


def landmarks_to_original(
    landmarks: LandmarkSet, spec: PreprocessSpec, original_size: tuple[int, int]
) -> LandmarkSet:
    """Map resized-frame landmarks back to original pixels; original_size is (W, H)."""
    if landmarks.frame != FRAME_RESIZED:
        raise ValueError("expected landmarks in the resized frame")
    sx, sy = spec.scale_for(*original_size)
    pts = tuple((x / sx, y / sy) for x, y in landmarks.points)
    return LandmarkSet(pts, frame=FRAME_ORIGINAL)


# ---------------------------------------------------------------------------
# ISBI-2015 layout
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = (".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff")


def _read_annotation(path: Path, num_landmarks: int) -> np.ndarray:
    lines = path.read_text().splitlines()
    if len(lines) < num_landmarks:
        raise ValueError(f"{path}: expected {num_landmarks} landmark lines, found {len(lines)}")
    pts = np.empty((num_landmarks, 2), dtype=np.float64)
    # Annotation files may carry extra classification lines; only the first
    # num_landmarks lines are coordinates.
    for i, line in enumerate(lines[:num_landmarks]):
        parts = line.strip().split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}: malformed landmark line {i + 1}: {line!r}")
        try:
            pts[i] = (float(parts[0]), float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"{path}: malformed landmark line {i + 1}: {line!r}") from exc
    return pts


def _find_dir(root: Path, name: str) -> Path:
    direct = root / name
    if direct.is_dir():
        return direct
    matches = sorted(p for p in root.rglob(name) if p.is_dir())
    if not matches:
        raise FileNotFoundError(f"annotation directory {name!r} not found under {root}")
    return matches[0]


def _split_for(image_number: int) -> str:
    if image_number <= 150:
        return SPLIT_TRAIN
    if image_number <= 300:
        return SPLIT_TEST1
    return SPLIT_TEST2


def load_isbi(
    root,
    image_dir: str = "RawImage",
    junior_dir: str = "400_junior",
    senior_dir: str = "400_senior",
    num_landmarks: int = ISBI_NUM_LANDMARKS,
) -> list[DatasetRecord]:
    """Load the ISBI-2015 cephalogram layout from `root`.

    Annotation ids found in the junior directory drive the record list; each
    id must have a senior annotation and an image file. Ground truth is the
    per-landmark mean of the two doctors. Splits follow the official
    numbering: 1-150 train, 151-300 test1, 301-400 test2.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    junior = _find_dir(root, junior_dir)
    senior = _find_dir(root, senior_dir)
    image_root = root / image_dir
    if not image_root.is_dir():
        image_root = root

    ann_files = sorted(junior.glob("*.txt"))
    if not ann_files:
        raise FileNotFoundError(f"no annotation files in {junior}")

    images_by_stem: dict[str, Path] = {}
    for path in sorted(image_root.rglob("*")):
        if path.suffix.lower() in _IMAGE_SUFFIXES:
            images_by_stem.setdefault(path.stem, path)

    records = []
    for jpath in ann_files:
        stem = jpath.stem
        spath = senior / jpath.name
        if not spath.is_file():
            raise FileNotFoundError(f"missing senior annotation {spath}")
        ipath = images_by_stem.get(stem)
        if ipath is None:
            raise FileNotFoundError(f"missing image for annotation id {stem!r} under {image_root}")
        mean_pts = 0.5 * (_read_annotation(jpath, num_landmarks) + _read_annotation(spath, num_landmarks))
        with Image.open(ipath) as im:
            image = np.asarray(im.convert("L"))
        try:
            number = int(stem)
        except ValueError as exc:
            raise ValueError(f"image id {stem!r} is not numeric (file {jpath})") from exc
        records.append(
            DatasetRecord(
                image_id=stem,
                image=image,
                landmarks=LandmarkSet.from_array(mean_pts, frame=FRAME_ORIGINAL),
                split=_split_for(number),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Synthetic desk-scale dataset
# ---------------------------------------------------------------------------

PATTERN_SIZE = 13
_PATTERN_HALF = PATTERN_SIZE // 2


def _pattern(index: int) -> np.ndarray:
    """Binary stamp for landmark `index`.

    The shapes are chosen to have pairwise distinct gross statistics (solid
    vs hollow, size, orientation, multiplicity) so a small detector can tell
    them apart; visually closer pairs also sit far apart in intensity.
    """
    half = _PATTERN_HALF
    dy, dx = np.mgrid[-half : half + 1, -half : half + 1]
    r = np.hypot(dx, dy)
    box = np.maximum(np.abs(dx), np.abs(dy))
    kind = index % 8
    if kind == 0:  # large solid disk
        shape = r <= 5.0
    elif kind == 1:  # X of both diagonals
        shape = ((np.abs(dx - dy) <= 2) | (np.abs(dx + dy) <= 2)) & (box <= 5)
    elif kind == 2:  # three horizontal bars
        shape = np.isin(dy, (-4, 0, 4)) & (np.abs(dx) <= 5)
    elif kind == 3:  # hollow ring
        shape = (r >= 3.0) & (r <= 5.5)
    elif kind == 4:  # solid half-disk, flat edge on the left
        shape = (r <= 5.5) & (dx >= 0)
    elif kind == 5:  # thick hollow square outline
        shape = (box >= 3) & (box <= 5)
    elif kind == 6:  # three vertical bars
        shape = np.isin(dx, (-4, 0, 4)) & (np.abs(dy) <= 5)
    else:  # solid diamond
        shape = np.abs(dx) + np.abs(dy) <= 5
    return shape.astype(np.float32)


def _blur3(img: np.ndarray) -> np.ndarray:
    """Small separable binomial blur (approximate Gaussian, sigma ~0.7)."""
    k0, k1, k2 = 0.25, 0.5, 0.25
    p = np.pad(img, ((0, 0), (1, 1)), mode="edge")
    horiz = k0 * p[:, :-2] + k1 * p[:, 1:-1] + k2 * p[:, 2:]
    p = np.pad(horiz, ((1, 1), (0, 0)), mode="edge")
    return k0 * p[:-2, :] + k1 * p[1:-1, :] + k2 * p[2:, :]


def _sample_layout(
    rng: np.random.Generator,
    num_landmarks: int,
    width: int,
    height: int,
    cluster_size: int,
    min_separation: float,
) -> list[tuple[int, int]]:
    margin = _PATTERN_HALF + 4
    cluster_reach = 12
    lo_x, hi_x = margin + cluster_reach, width - margin - cluster_reach
    lo_y, hi_y = margin + cluster_reach, height - margin - cluster_reach
    if lo_x >= hi_x or lo_y >= hi_y:
        raise ValueError(f"image size {width}x{height} too small for the structure layout")

    base_offsets = ((-10, -6), (10, -6), (0, 10))
    centers: list[tuple[int, int]] = []
    if cluster_size:
        cx = int(rng.integers(lo_x, hi_x + 1))
        cy = int(rng.integers(lo_y, hi_y + 1))
        for ox, oy in base_offsets[:cluster_size]:
            jx = int(rng.integers(-2, 3))
            jy = int(rng.integers(-2, 3))
            centers.append((cx + ox + jx, cy + oy + jy))

    for _ in range(num_landmarks - cluster_size):
        for _attempt in range(500):
            x = int(rng.integers(margin, width - margin + 1))
            y = int(rng.integers(margin, height - margin + 1))
            if all(math.hypot(x - px, y - py) >= min_separation for px, py in centers):
                centers.append((x, y))
                break
        else:
            raise ValueError(
                f"cannot place {num_landmarks} structures with separation "
                f"{min_separation} in a {width}x{height} image"
            )
    return centers


def synth_dataset(
    rng: np.random.Generator,
    n_images: int,
    num_landmarks: int = 8,
    size: tuple[int, int] = (128, 128),
    split: str = SPLIT_TRAIN,
    cluster_size: int = 3,
    min_separation: float = 30.0,
    noise: float = 4.0,
    contrast: float = 70.0,
    background: float = 80.0,
) -> list[DatasetRecord]:
    """Generate soft-contrast images with distinctive structures at known
    landmark positions.

    Structures are additive brightenings (each landmark with its own shape
    and contrast band, `contrast` down to 60% of it) over a flat background
    plus iid speckle of the given standard deviation, lightly blurred. The
    deliberately modest contrast keeps the trained detector's evidence
    margins comparable to small perturbation budgets. The first
    `cluster_size` landmarks form a tight triple around a common (moving)
    center; the rest are placed with at least `min_separation` pixels
    between them. Landmarks are exactly the structure centers.
    """
    width, height = size
    if num_landmarks < cluster_size:
        cluster_size = 0
    records = []
    for i in range(n_images):
        centers = _sample_layout(rng, num_landmarks, width, height, cluster_size, min_separation)
        img = np.full((height, width), background, dtype=np.float32)
        img += rng.normal(0.0, noise, size=(height, width)).astype(np.float32)
        for idx, (cx, cy) in enumerate(centers):
            stamp = _pattern(idx)
            band = contrast * (1.0 - 0.45 * idx / max(num_landmarks - 1, 1))
            strength = band * (1.0 - 0.05 * float(rng.random()))
            y0, x0 = cy - _PATTERN_HALF, cx - _PATTERN_HALF
            img[y0 : y0 + PATTERN_SIZE, x0 : x0 + PATTERN_SIZE] += stamp * strength
        img = _blur3(img)
        records.append(
            DatasetRecord(
                image_id=f"{split}_{i:03d}",
                image=np.clip(img, 0, 255).astype(np.uint8),
                landmarks=LandmarkSet(
                    tuple((float(x), float(y)) for x, y in centers), frame=FRAME_ORIGINAL
                ),
                split=split,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Dataset persistence (synthetic format: PNGs + JSON index)
# ---------------------------------------------------------------------------


def save_dataset(records: list[DatasetRecord], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in records:
        Image.fromarray(rec.image).save(directory / f"{rec.image_id}.png")
        index.append(
            {
                "image_id": rec.image_id,
                "split": rec.split,
                "frame": rec.landmarks.frame,
                "landmarks": [[x, y] for x, y in rec.landmarks.points],
            }
        )
    index_path = directory / "index.json"
    index_path.write_text(json.dumps(index, indent=2))
    return index_path


def load_dataset(directory) -> list[DatasetRecord]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"dataset index {index_path} does not exist")
    records = []
    for entry in json.loads(index_path.read_text()):
        path = directory / f"{entry['image_id']}.png"
        with Image.open(path) as im:
            image = np.asarray(im)
        records.append(
            DatasetRecord(
                image_id=entry["image_id"],
                image=image,
                landmarks=LandmarkSet(
                    tuple((x, y) for x, y in entry["landmarks"]), frame=entry["frame"]
                ),
                split=entry["split"],
            )
        )
    return records


# ---------------------------------------------------------------------------
# Visualization
# ---------------------------------------------------------------------------

COLOR_CLEAN = (230, 40, 40)       # clean predictions
COLOR_TARGETED = (40, 200, 60)    # attacked landmarks after the attack
COLOR_STATIONARY = (60, 110, 255)  # pinned landmarks after the attack


def _to_rgb(norm_image: np.ndarray) -> Image.Image:
    if norm_image.ndim == 3:
        gray = norm_image.mean(axis=0) if norm_image.shape[0] > 1 else norm_image[0]
    else:
        gray = norm_image
    return Image.fromarray(denormalize_image(gray)).convert("RGB")


def _draw_points(draw: ImageDraw.ImageDraw, points, color, radius: int = 3) -> None:
    for x, y in points:
        draw.ellipse((x - radius, y - radius, x + radius, y + radius), outline=color, width=1)
        draw.point((x, y), fill=color)


def _draw_crosses(draw: ImageDraw.ImageDraw, points, color, radius: int = 4) -> None:
    for x, y in points:
        draw.line((x - radius, y, x + radius, y), fill=color, width=1)
        draw.line((x, y - radius, x, y + radius), fill=color, width=1)


def perturbation_panel(original: np.ndarray, adversarial: np.ndarray, magnification: float) -> np.ndarray:
    """Perturbation rendered around mid-gray: clamp(mid + magnification * delta)."""
    delta = (np.asarray(adversarial, np.float64) - np.asarray(original, np.float64)) * 127.5
    if delta.ndim == 3:
        delta = delta.mean(axis=0) if delta.shape[0] > 1 else delta[0]
    panel = np.clip(127.5 + magnification * delta, 0, 255)
    return np.round(panel).astype(np.uint8)


def export_visualization(
    original: np.ndarray,
    adversarial: np.ndarray,
    predictions_before: LandmarkSet,
    predictions_after: LandmarkSet,
    spec,
    path,
    magnification: float = 8.0,
) -> Path:
    """Write a side-by-side panel: clean image + predictions, magnified
    perturbation, adversarial image + color-coded predictions.

    `spec` is the attack TargetSpec; its targeted landmarks are drawn in
    green (crosses mark the desired positions), stationary ones in blue.
    """
    if original.shape != adversarial.shape:
        raise ValueError("original and adversarial shapes differ")

    clean_img = _to_rgb(original)
    draw = ImageDraw.Draw(clean_img)
    _draw_points(draw, predictions_before.points, COLOR_CLEAN)

    pert_img = Image.fromarray(perturbation_panel(original, adversarial, magnification)).convert("RGB")

    adv_img = _to_rgb(adversarial)
    draw = ImageDraw.Draw(adv_img)
    targeted_idx = set(spec.targeted_indices)
    after = predictions_after.points
    _draw_points(draw, [after[i] for i in sorted(targeted_idx)], COLOR_TARGETED)
    _draw_points(draw, [after[i] for i in spec.stationary], COLOR_STATIONARY)
    _draw_crosses(draw, [(t.x, t.y) for t in spec.targeted], COLOR_TARGETED)

    gutter = 4
    w, h = clean_img.size
    panel = Image.new("RGB", (3 * w + 2 * gutter, h), (255, 255, 255))
    for slot, img in enumerate((clean_img, pert_img, adv_img)):
        panel.paste(img, (slot * (w + gutter), 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panel.save(path)
    return path
