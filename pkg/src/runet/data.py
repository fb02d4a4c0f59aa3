"""Dataset loading, synthetic data generation and overlay export.

On-disk layout (PNG only)::

    root/{train,val,test}/images/<id>.png   RGB, 8 bit
    root/{train,val,test}/masks/<id>.png    grayscale, >= 128 is foreground
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import InvalidConfigError, InvalidDataError

SPLITS = ("train", "val", "test")
OVERLAY_COLOR = np.array([1.0, 0.0, 0.0])
OVERLAY_ALPHA = 0.4


@dataclass
class SamplePair:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    mask: np.ndarray   # (1,H,W) float32 in {0,1}
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise InvalidDataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------

def image_to_array(img: Image.Image) -> np.ndarray:
    return np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def mask_to_array(img: Image.Image) -> np.ndarray:
    return (np.asarray(img.convert("L")) >= 128).astype(np.float32)[None]


def read_image(path: Union[str, Path], size: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return image_to_array(img)


def read_mask(path: Union[str, Path], size: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.NEAREST)
        return mask_to_array(img)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3,H,W) floats in [0,1] -> (H,W,3) bytes."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: Union[str, Path], array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def write_mask_png(path: Union[str, Path], mask: np.ndarray) -> None:
    m = np.asarray(mask).reshape(np.asarray(mask).shape[-2:])
    write_png(path, np.where(m > 0.5, 255, 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _sorted_names(names) -> list[str]:
    return sorted(names, key=lambda s: s.encode("utf-8"))


def load_dataset(root: Union[str, Path], split: str, size: Optional[int] = None) -> list[SamplePair]:
    """Load one split in bytewise-lexicographic basename order."""
    base = Path(root) / split
    img_dir, mask_dir = base / "images", base / "masks"
    if not img_dir.is_dir():
        raise InvalidDataError(f"missing image directory {img_dir}")
    names = _sorted_names(p.name for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    if not names:
        raise InvalidDataError(f"split {split!r} under {root} is empty")
    samples = []
    for name in names:
        mask_path = mask_dir / name
        if not mask_path.is_file():
            raise InvalidDataError(f"no mask for image {name} (expected {mask_path})")
        image = read_image(img_dir / name, size)
        mask = read_mask(mask_path, size)
        samples.append(SamplePair(image, mask, Path(name).stem))
    return samples


def write_split(root: Union[str, Path], split: str, samples: Sequence[SamplePair]) -> None:
    img_dir = Path(root) / split / "images"
    mask_dir = Path(root) / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_png(img_dir / f"{s.id}.png", to_uint8(s.image))
        write_mask_png(mask_dir / f"{s.id}.png", s.mask)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def inside(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        return self.radius(xx, yy) <= 1.0

    def radius(self, xx, yy):
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = (xx - self.cx) * c + (yy - self.cy) * s
        v = -(xx - self.cx) * s + (yy - self.cy) * c
        return np.sqrt((u / self.a) ** 2 + (v / self.b) ** 2)


@dataclass(frozen=True)
class Capsule:
    x0: float
    y0: float
    x1: float
    y1: float
    r: float

    def inside(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        dx, dy = self.x1 - self.x0, self.y1 - self.y0
        t = ((xx - self.x0) * dx + (yy - self.y0) * dy) / (dx * dx + dy * dy)
        t = np.clip(t, 0.0, 1.0)
        return (xx - self.x0 - t * dx) ** 2 + (yy - self.y0 - t * dy) ** 2 <= self.r ** 2


@dataclass(frozen=True)
class Outline:
    """Thin elliptical ring: a distractor painted in the foreground colour."""

    ellipse: Ellipse
    width: float

    def inside(self, xx, yy):
        e = self.ellipse
        return np.abs(e.radius(xx, yy) - 1.0) * min(e.a, e.b) <= self.width / 2


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates (x right, y down)."""
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def rasterize_shapes(shapes: Sequence, size: int) -> np.ndarray:
    xx, yy = pixel_grid(size)
    mask = np.zeros((size, size), dtype=bool)
    for shape in shapes:
        mask |= shape.inside(xx, yy)
    return mask


@dataclass
class SyntheticSample:
    sample: SamplePair
    shapes: list
    distractors: list


FG_FRACTION = (0.02, 0.50)


def _random_foreground(rng: np.random.Generator, size: int):
    if rng.random() < 0.5:
        return Ellipse(rng.uniform(0.2, 0.8) * size, rng.uniform(0.2, 0.8) * size,
                       rng.uniform(0.08, 0.22) * size, rng.uniform(0.06, 0.16) * size,
                       rng.uniform(0, math.pi))
    length = rng.uniform(0.2, 0.5) * size
    ang = rng.uniform(0, 2 * math.pi)
    x0, y0 = rng.uniform(0.15, 0.85, size=2) * size
    return Capsule(x0, y0, x0 + length * math.cos(ang), y0 + length * math.sin(ang),
                   rng.uniform(0.05, 0.09) * size)


def _random_outline(rng: np.random.Generator, size: int) -> Outline:
    e = Ellipse(rng.uniform(0.15, 0.85) * size, rng.uniform(0.15, 0.85) * size,
                rng.uniform(0.10, 0.25) * size, rng.uniform(0.08, 0.18) * size,
                rng.uniform(0, math.pi))
    return Outline(e, rng.uniform(1.2, 2.2))


def _background(rng: np.random.Generator, size: int, avoid: np.ndarray) -> np.ndarray:
    xx, yy = pixel_grid(size)
    xx, yy = xx / size, yy / size

    def far_color():
        while True:
            c = rng.uniform(0.0, 1.0, size=3)
            if np.linalg.norm(c - avoid) > 0.45:
                return c

    c0, c1 = far_color(), far_color()
    ang = rng.uniform(0, 2 * math.pi)
    t = np.clip(0.5 + (xx - 0.5) * math.cos(ang) + (yy - 0.5) * math.sin(ang), 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(2):
        fx, fy = rng.uniform(1, 5, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        img += rng.uniform(0.03, 0.08) * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)
    return img


def synthesize_sample(rng: np.random.Generator, size: int, name: str) -> SyntheticSample:
    """One image with 1-3 filled foreground shapes and 1-3 distractor outlines."""
    xx, yy = pixel_grid(size)
    while True:
        shapes = [_random_foreground(rng, size) for _ in range(int(rng.integers(1, 4)))]
        mask = rasterize_shapes(shapes, size)
        if FG_FRACTION[0] <= mask.mean() <= FG_FRACTION[1]:
            break
    fg_color = np.array([rng.uniform(0.65, 0.95), rng.uniform(0.35, 0.6), rng.uniform(0.25, 0.5)])
    img = _background(rng, size, fg_color)
    distractors = [_random_outline(rng, size) for _ in range(int(rng.integers(1, 4)))]
    for d in distractors:
        img[:, d.inside(xx, yy)] = fg_color[:, None]
    shade = 1.0 + 0.15 * (yy / size - 0.5)
    img[:, mask] = (fg_color[:, None, None] * shade)[:, mask]
    img += rng.normal(0.0, 0.04, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize so the in-memory sample equals what a PNG round trip yields
    img = np.rint(img * 255.0).astype(np.float32) / 255.0
    pair = SamplePair(img.astype(np.float32), mask.astype(np.float32)[None], name)
    return SyntheticSample(pair, shapes, distractors)


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = (n * 6) // 10
    n_val = (n * 2) // 10
    return n_train, n_val, n - n_train - n_val


def generate_synthetic(seed: int, n: int, size: int = 64,
                       out_dir: Union[str, Path, None] = None) -> list[SyntheticSample]:
    """Generate ``n`` samples deterministically from ``seed``.

    Sample ``i`` depends only on ``(seed, i)``.  With ``out_dir`` the samples
    are also written as train/val/test by index in 60/20/20 proportion.
    """
    if size % 16:
        raise InvalidConfigError(f"synthetic image size must be divisible by 16, got {size}")
    if n < 1:
        raise InvalidConfigError("n must be positive")
    samples = [synthesize_sample(np.random.default_rng([seed, i]), size, f"{i:05d}") for i in range(n)]
    if out_dir is not None:
        n_train, n_val, _ = split_counts(n)
        pairs = [s.sample for s in samples]
        write_split(out_dir, "train", pairs[:n_train])
        write_split(out_dir, "val", pairs[n_train:n_train + n_val])
        write_split(out_dir, "test", pairs[n_train + n_val:])
    return samples


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

def overlay(image: np.ndarray, prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Alpha-blend the highlight colour over pixels with probability >= threshold."""
    image = np.asarray(image, dtype=np.float64)
    prob = np.asarray(prob_map).reshape(image.shape[1:])
    fg = prob >= threshold
    out = image.copy()
    out[:, fg] = (1 - OVERLAY_ALPHA) * image[:, fg] + OVERLAY_ALPHA * OVERLAY_COLOR[:, None]
    return out


def export_overlay(image: np.ndarray, prob_map: np.ndarray, path: Union[str, Path]) -> None:
    if np.asarray(prob_map).size != image.shape[1] * image.shape[2]:
        raise InvalidDataError("probability map and image sizes differ")
    parent = Path(path).parent
    if str(parent) and not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    if parent.is_dir() and not os.access(parent, os.W_OK):
        raise PermissionError(f"output directory is not writable: {parent}")
    write_png(path, to_uint8(overlay(image, prob_map)))
