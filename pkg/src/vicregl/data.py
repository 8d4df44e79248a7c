"""Synthetic shapes datasets and the packed ``VDSB`` dataset file format.

File layout (little-endian)::

    magic "VDSB" | u32 version | u32 count | u32 height | u32 width
    | u32 channels | u32 classes | u32 flags (bit 0: masks, bit 1: labels)
    then per sample: u8 pixels (channels x height x width)
                     [u8 mask (height x width)] [i32 label]

Pixels are stored as 8-bit values and decoded to ``value / 255``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from .geometry import SeedSample

MAGIC = b"VDSB"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIII")
FLAG_MASKS = 1
FLAG_LABELS = 2

SHAPE_KINDS = ("disk", "rectangle", "triangle")
# area of each kind in units of size**2, size being the half extent
AREA_FACTOR = {"disk": math.pi, "rectangle": 3.0, "triangle": 2.0}


class DatasetFormatError(ValueError):
    pass


@dataclass
class ShapesConfig:
    """Random shapes on a value-noise background.

    Class ``k`` (1-based) is ``kinds[k - 1]``; class 0 is background. Each
    shape takes a color from its class palette, perturbed by ``color_jitter``.
    """

    canvas_size: int = 64
    shapes_per_image: Tuple[int, int] = (1, 3)
    kinds: Tuple[str, ...] = SHAPE_KINDS
    # half extent of a shape in pixels; None scales (6, 14) from a 64-pixel canvas
    size_range: Optional[Tuple[float, float]] = None
    palette: Tuple[Tuple[Tuple[float, float, float], ...], ...] = (
        ((0.85, 0.25, 0.2), (0.9, 0.6, 0.15)),
        ((0.2, 0.7, 0.3), (0.55, 0.8, 0.2)),
        ((0.2, 0.35, 0.85), (0.6, 0.3, 0.8)),
    )
    color_jitter: float = 0.08
    background_cells: int = 4
    background_level: Tuple[float, float] = (0.3, 0.7)
    background_amplitude: float = 0.15
    max_tries: int = 50
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if len(self.palette) < len(self.kinds):
            raise ValueError("palette needs one color list per shape kind")
        if self.canvas_size < 8:
            raise ValueError(f"canvas_size must be >= 8, got {self.canvas_size}")
        if self.size_range is None:
            scale = self.canvas_size / 64.0
            self.size_range = (6.0 * scale, 14.0 * scale)
        lo, hi = self.size_range
        if not 0 < lo <= hi or 2 * hi > self.canvas_size:
            raise ValueError(f"size_range {self.size_range} does not fit a {self.canvas_size}px canvas")

    @property
    def num_classes(self) -> int:
        return len(self.kinds) + 1

    def expected_class_fractions(self) -> np.ndarray:
        """Expected fraction of pixels per class, ignoring placement failures."""
        a, b = self.size_range
        mean_sq = (a * a + a * b + b * b) / 3.0
        lo, hi = self.shapes_per_image
        mean_count = (lo + hi) / 2.0
        fractions = np.zeros(self.num_classes)
        for k, kind in enumerate(self.kinds, start=1):
            fractions[k] = mean_count / len(self.kinds) * AREA_FACTOR[kind] * mean_sq
        fractions /= self.canvas_size ** 2
        fractions[0] = 1.0 - fractions[1:].sum()
        return fractions


@dataclass
class ShapesDataset:
    """In-memory dataset: images ``(N, 3, H, W)`` in [0, 1], masks and labels."""

    images: np.ndarray
    masks: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> SeedSample:
        return SeedSample(self.images[i],
                          None if self.masks is None else self.masks[i],
                          None if self.labels is None else int(self.labels[i]))

    def __iter__(self) -> Iterator[SeedSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ShapesDataset":
        idx = np.asarray(idx)
        return ShapesDataset(self.images[idx],
                             None if self.masks is None else self.masks[idx],
                             None if self.labels is None else self.labels[idx],
                             self.num_classes)

    def split(self, holdout: float = 0.25) -> Tuple["ShapesDataset", "ShapesDataset"]:
        n_test = max(1, int(round(len(self) * holdout)))
        return self.subset(np.arange(len(self) - n_test)), self.subset(np.arange(len(self) - n_test, len(self)))


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise in [0, 1]: a coarse random lattice bilinearly upsampled."""
    lattice = rng.random((3, cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size, endpoint=False) + 0.5 * cells / size
    i0 = np.minimum(np.floor(t).astype(int), cells - 1)
    f = t - i0
    rows = lattice[:, i0] * (1 - f)[None, :, None] + lattice[:, i0 + 1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def _shape_mask(kind: str, cy: float, cx: float, s: float, aspect: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= s * s
    if kind == "rectangle":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s * aspect)
    # isosceles triangle, apex at the top, base 2s at the bottom, height 2s
    t = (dy + s) / (2 * s)
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= s * t)


def render_sample(cfg: ShapesConfig, rng: np.random.Generator):
    """Draw one image. Returns ``(pixels uint8 (3, S, S), mask uint8 (S, S), label)``."""
    size = cfg.canvas_size
    base = rng.uniform(*cfg.background_level, size=3)
    noise = _value_noise(rng, size, cfg.background_cells) - 0.5
    img = np.clip(base[:, None, None] + 2 * cfg.background_amplitude * noise, 0.0, 1.0)
    mask = np.zeros((size, size), dtype=np.uint8)

    n_shapes = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
    boxes: List[Tuple[float, float, float, float]] = []
    for _ in range(n_shapes):
        k = int(rng.integers(len(cfg.kinds)))
        kind = cfg.kinds[k]
        s = rng.uniform(*cfg.size_range)
        aspect = rng.uniform(0.5, 1.0) if kind == "rectangle" else 1.0
        colors = cfg.palette[k]
        color = np.clip(np.asarray(colors[int(rng.integers(len(colors)))])
                        + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3), 0.0, 1.0)
        for _ in range(cfg.max_tries):
            cy = rng.uniform(s, size - s)
            cx = rng.uniform(s, size - s)
            box = (cy - s, cx - s, cy + s, cx + s)
            if all(box[2] <= o[0] or o[2] <= box[0] or box[3] <= o[1] or o[3] <= box[1]
                   for o in boxes):
                break
        else:
            continue
        boxes.append(box)
        inside = _shape_mask(kind, cy, cx, s, aspect, size)
        img[:, inside] = color[:, None]
        mask[inside] = k + 1

    counts = np.bincount(mask.ravel(), minlength=cfg.num_classes)
    label = int(np.argmax(counts[1:]) + 1) if counts[1:].any() else 0
    pixels = np.round(img * 255).astype(np.uint8)
    return pixels, mask, label


def render_shapes(cfg: ShapesConfig, n: int) -> ShapesDataset:
    """Generate ``n`` samples deterministically from ``cfg.seed``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(cfg.seed)
    size = cfg.canvas_size
    pixels = np.empty((n, 3, size, size), dtype=np.uint8)
    masks = np.empty((n, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        pixels[i], masks[i], labels[i] = render_sample(cfg, rng)
    return ShapesDataset(pixels.astype(np.float32) / 255.0, masks, labels, cfg.num_classes)


def write_dataset(path: Union[str, Path], pixels: np.ndarray, masks: Optional[np.ndarray],
                  labels: Optional[np.ndarray], num_classes: int) -> Path:
    path = Path(path)
    n, c, h, w = pixels.shape
    flags = (FLAG_MASKS if masks is not None else 0) | (FLAG_LABELS if labels is not None else 0)
    try:
        with open(path, "wb") as f:
            f.write(HEADER.pack(MAGIC, VERSION, n, h, w, c, num_classes, flags))
            for i in range(n):
                f.write(np.ascontiguousarray(pixels[i], dtype=np.uint8).tobytes())
                if masks is not None:
                    f.write(np.ascontiguousarray(masks[i], dtype=np.uint8).tobytes())
                if labels is not None:
                    f.write(struct.pack("<i", int(labels[i])))
    except OSError as e:
        raise OSError(f"cannot write dataset {path}: {e}") from e
    return path


def gen_shapes(cfg: ShapesConfig, n: int, path: Union[str, Path]) -> Path:
    """Render ``n`` shapes samples and write them to a ``VDSB`` file."""
    ds = render_shapes(cfg, n)
    pixels = np.round(ds.images * 255).astype(np.uint8)
    return write_dataset(path, pixels, ds.masks, ds.labels, cfg.num_classes)


def _read_vdsb(path: Path) -> ShapesDataset:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read dataset {path}: {e}") from e
    if len(data) < HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header at byte {len(data)}")
    magic, version, n, h, w, c, num_classes, flags = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at byte 4")
    has_masks, has_labels = bool(flags & FLAG_MASKS), bool(flags & FLAG_LABELS)
    rec = c * h * w + (h * w if has_masks else 0) + (4 if has_labels else 0)
    expected = HEADER.size + n * rec
    if len(data) != expected:
        where = min(len(data), expected)
        raise DatasetFormatError(
            f"{path}: file has {len(data)} bytes but header declares {expected} (mismatch at byte {where})")
    dt = [("pixels", np.uint8, (c, h, w))]
    if has_masks:
        dt.append(("mask", np.uint8, (h, w)))
    if has_labels:
        dt.append(("label", "<i4"))
    records = np.frombuffer(data, dtype=np.dtype(dt), count=n, offset=HEADER.size)
    return ShapesDataset(records["pixels"].astype(np.float32) / 255.0,
                         records["mask"].copy() if has_masks else None,
                         records["label"].astype(np.int64) if has_labels else None,
                         num_classes)


def _read_png_dir(path: Path) -> ShapesDataset:
    from PIL import Image

    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DatasetFormatError(f"{path}: no PNG files")
    images = []
    for f in files:
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        images.append(arr.transpose(2, 0, 1))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{path}: images have different sizes {sorted(shapes)}")
    return ShapesDataset(np.stack(images))


def read_dataset(path: Union[str, Path]) -> ShapesDataset:
    """Load a ``VDSB`` file or a directory of PNG images into memory."""
    path = Path(path)
    if path.is_dir():
        return _read_png_dir(path)
    return _read_vdsb(path)


def load_dataset(path: Union[str, Path], shuffle: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Iterator[SeedSample]:
    """Yield samples in stored order, or permuted by ``rng`` when ``shuffle``.

    The whole file is validated before the first sample is produced.
    """
    ds = read_dataset(path)
    order = np.arange(len(ds))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling requires an explicit rng")
        order = rng.permutation(len(ds))
    return (ds[int(i)] for i in order)
