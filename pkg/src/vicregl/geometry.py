"""View sampling, crop resampling and feature-map coordinate grids.

Coordinates are ``(row, col)`` in continuous seed-image pixel units with the
origin at the top-left corner of the seed image; pixel ``k`` covers
``[k, k + 1)`` and has its center at ``k + 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np


@dataclass
class SeedSample:
    """A seed image with optional segmentation mask and class label."""

    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"pixels must have shape (3, H, W), got {self.pixels.shape}")
        h, w = self.pixels.shape[1:]
        if h < 8 or w < 8:
            raise ValueError(f"seed images must be at least 8x8, got {h}x{w}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != (h, w):
                raise ValueError(f"mask shape {self.mask.shape} does not match image {(h, w)}")

    @property
    def dims(self) -> Tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass(frozen=True)
class CropRect:
    """Geometry of one view: crop rectangle in seed pixels, flip, output size."""

    x0: float
    y0: float
    crop_w: float
    crop_h: float
    hflip: bool = False
    out_h: int = 64
    out_w: int = 64

    def validate(self, seed_dims: Tuple[int, int]) -> None:
        h, w = seed_dims
        # slack for float round-off in sampled rectangles
        tol = 1e-9 * max(h, w)
        if self.crop_w <= 0 or self.crop_h <= 0:
            raise ValueError(f"crop size must be positive: {self}")
        if self.x0 < -tol or self.y0 < -tol:
            raise ValueError(f"crop origin must be non-negative: {self}")
        if self.x0 + self.crop_w > w + tol or self.y0 + self.crop_h > h + tol:
            raise ValueError(f"crop {self} exceeds seed image {h}x{w}")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError(f"output size must be >= 1: {self}")

    def translated(self, dy: float, dx: float) -> "CropRect":
        return CropRect(self.x0 + dx, self.y0 + dy, self.crop_w, self.crop_h,
                        self.hflip, self.out_h, self.out_w)


@dataclass
class PositionGrid:
    """Absolute seed-image ``(row, col)`` coordinates of every feature-map cell."""

    coords: np.ndarray
    view_id: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.coords.shape[0], self.coords.shape[1]

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1, 2)


@dataclass
class AugmentConfig:
    """Color jitter parameters; ``enabled=False`` makes jitter the identity."""

    enabled: bool = False
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2


def sample_view_spec(
    rng: np.random.Generator,
    seed_dims: Tuple[int, int],
    area_range: Tuple[float, float] = (0.08, 1.0),
    aspect_range: Tuple[float, float] = (3 / 4, 4 / 3),
    out_size: Tuple[int, int] = (64, 64),
    flip_prob: float = 0.5,
    max_tries: int = 10,
) -> CropRect:
    """Sample a random resized crop.

    The area fraction is drawn uniformly from ``area_range``. The log aspect
    ratio (width / height) is then drawn uniformly from the part of
    ``aspect_range`` for which a crop of that area fits inside the seed image,
    so the area distribution is not distorted by rejections. The position is
    uniform over all placements that keep the crop inside the image.
    """
    lo, hi = area_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"area_range must satisfy 0 < lo <= hi <= 1, got {area_range}")
    r_lo, r_hi = aspect_range
    if not 0 < r_lo <= r_hi:
        raise ValueError(f"invalid aspect_range {aspect_range}")
    h, w = seed_dims
    total = float(h) * float(w)
    out_h, out_w = out_size

    for _ in range(max_tries):
        area = total * rng.uniform(lo, hi)
        # crop_w = sqrt(area * r) <= w  and  crop_h = sqrt(area / r) <= h
        feas_lo = max(r_lo, area / (h * h))
        feas_hi = min(r_hi, (w * w) / area)
        if feas_lo > feas_hi:
            continue
        ratio = math.exp(rng.uniform(math.log(feas_lo), math.log(feas_hi)))
        crop_w = min(math.sqrt(area * ratio), float(w))
        crop_h = min(math.sqrt(area / ratio), float(h))
        x0 = rng.uniform(0.0, w - crop_w)
        y0 = rng.uniform(0.0, h - crop_h)
        hflip = bool(rng.random() < flip_prob)
        return CropRect(x0, y0, crop_w, crop_h, hflip, out_h, out_w)

    # centered crop of maximal size with an admissible aspect ratio
    ratio = min(max(w / h, r_lo), r_hi)
    crop_w = min(float(w), h * ratio)
    crop_h = min(float(h), crop_w / ratio)
    hflip = bool(rng.random() < flip_prob)
    return CropRect((w - crop_w) / 2, (h - crop_h) / 2, crop_w, crop_h, hflip, out_h, out_w)


def _interp_matrix(start: float, length: float, n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic bilinear weights (half-pixel centers, edge clamped)."""
    scale = length / n_out
    pos = start + (np.arange(n_out) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    mat[rows, i0] = 1.0 - frac
    # i1 == i0 only at the clamped edge, where frac == 0
    mat[rows, i1] += frac
    return mat


def resample(pixels: np.ndarray, crop: CropRect) -> np.ndarray:
    """Bilinearly resample the crop region of a ``(C, H, W)`` array to the output size."""
    _, h, w = pixels.shape
    ry = _interp_matrix(crop.y0, crop.crop_h, crop.out_h, h)
    rx = _interp_matrix(crop.x0, crop.crop_w, crop.out_w, w)
    out = ry @ pixels.astype(np.float64) @ rx.T
    if crop.hflip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def _grayscale(img: np.ndarray) -> np.ndarray:
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.broadcast_to(gray, img.shape)


def color_jitter(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.enabled:
        return img
    out = img
    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        out = np.clip(out * b, 0.0, 1.0)
        mean = _grayscale(out).mean()
        out = np.clip((out - mean) * c + mean, 0.0, 1.0)
        gray = _grayscale(out)
        out = np.clip(gray + (out - gray) * s, 0.0, 1.0)
    if rng.random() < cfg.grayscale_prob:
        out = np.array(_grayscale(out))
    return out


def apply_view(
    img: SeedSample,
    crop: CropRect,
    jitter: Optional[AugmentConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Crop, resize, optionally mirror and color-jitter a seed image.

    With jitter disabled and the identity crop (full image, output size equal
    to the seed size, no flip) the input pixels are returned unchanged.
    """
    crop.validate(img.dims)
    out = resample(img.pixels, crop)
    if jitter is not None and jitter.enabled:
        if rng is None:
            raise ValueError("color jitter requires an rng")
        out = color_jitter(out, jitter, rng)
    return out.astype(img.pixels.dtype if img.pixels.dtype.kind == "f" else np.float64)


def position_grid(crop: CropRect, map_dims: Tuple[int, int], view_id: int = 0) -> PositionGrid:
    """Seed-image coordinates of the centers of an ``H x W`` grid laid over the crop."""
    h, w = map_dims
    if h < 1 or w < 1:
        raise ValueError(f"map dims must be >= 1, got {map_dims}")
    rows = crop.y0 + (np.arange(h) + 0.5) * (crop.crop_h / h)
    cols = crop.x0 + (np.arange(w) + 0.5) * (crop.crop_w / w)
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    if crop.hflip:
        coords = coords[:, ::-1]
    return PositionGrid(np.ascontiguousarray(coords), view_id)


@dataclass
class ViewSampler:
    """Draws the crops of a multi-crop set for one seed image.

    ``n_large`` views are rendered at ``large_size`` and ``n_small`` at
    ``small_size``; small views use ``small_area_range``.
    """

    n_large: int = 2
    n_small: int = 0
    large_size: Tuple[int, int] = (64, 64)
    small_size: Tuple[int, int] = (32, 32)
    area_range: Tuple[float, float] = (0.08, 1.0)
    small_area_range: Tuple[float, float] = (0.05, 0.3)
    aspect_range: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter: AugmentConfig = field(default_factory=AugmentConfig)

    def sample(self, rng: np.random.Generator, seed_dims: Tuple[int, int]) -> Sequence[CropRect]:
        crops = [sample_view_spec(rng, seed_dims, self.area_range, self.aspect_range,
                                  self.large_size, self.flip_prob) for _ in range(self.n_large)]
        crops += [sample_view_spec(rng, seed_dims, self.small_area_range, self.aspect_range,
                                   self.small_size, self.flip_prob) for _ in range(self.n_small)]
        return crops
