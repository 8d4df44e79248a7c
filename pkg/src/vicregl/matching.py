"""Nearest-neighbour correspondences between feature-map cells.

Two matchers pair every cell of a source map with one cell of a target map:
by distance between absolute seed-image coordinates (location matching) or by
l2 distance between embedded vectors (feature matching). ``top_gamma`` keeps
the pairs with the smallest distances.

The batched helpers operate on torch tensors shaped ``(B, N, k)`` and are the
ones used by the loss; the ``MatchSet`` functions wrap them for single maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
import torch

from .geometry import PositionGrid


@dataclass
class MatchSet:
    """Pairs ``(src cell, dst cell, dist)`` with cells as ``(i, j)`` indices.

    ``src`` and ``dst`` hold flat row-major indices into maps of shape
    ``src_shape`` and ``dst_shape``.
    """

    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    src_shape: Tuple[int, int]
    dst_shape: Tuple[int, int]
    src_view: int = 0
    dst_view: int = 1

    def __len__(self) -> int:
        return len(self.src)

    def __iter__(self) -> Iterator[Tuple[Tuple[int, int], Tuple[int, int], float]]:
        return iter(self.pairs)

    @property
    def pairs(self):
        sw, dw = self.src_shape[1], self.dst_shape[1]
        return [((int(s) // sw, int(s) % sw), (int(d) // dw, int(d) % dw), float(x))
                for s, d, x in zip(self.src, self.dst, self.dist)]


def pairwise_distances(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Euclidean distances between rows, ``(..., N, k) x (..., M, k) -> (..., N, M)``.

    Uses explicit differences rather than the Gram expansion so that small
    distances keep full relative precision.
    """
    return torch.cdist(src, dst, compute_mode="donot_use_mm_for_euclid_dist")


@torch.no_grad()
def nearest(src: torch.Tensor, dst: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Index and distance of the nearest ``dst`` row for every ``src`` row.

    Ties go to the lowest (row-major) ``dst`` index.
    """
    dist = pairwise_distances(src, dst)
    idx = torch.argmin(dist, dim=-1)
    return idx, torch.gather(dist, -1, idx.unsqueeze(-1)).squeeze(-1)


@torch.no_grad()
def select_best(dist: torch.Tensor, gamma: int) -> torch.Tensor:
    """Source indices of the ``gamma`` smallest distances along the last axis.

    Ordered by ascending distance, ties by source index.
    """
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    order = torch.sort(dist, dim=-1, stable=True).indices
    return order[..., :gamma]


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.detach()
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def location_match(grid_a: PositionGrid, grid_b: PositionGrid) -> MatchSet:
    """Match every cell of ``grid_a`` to the spatially closest cell of ``grid_b``."""
    a, b = grid_a.flat(), grid_b.flat()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("position grids must be nonempty")
    idx, dist = nearest(_as_tensor(a), _as_tensor(b))
    return MatchSet(np.arange(len(a)), idx.numpy(), dist.numpy(),
                    grid_a.shape, grid_b.shape, grid_a.view_id, grid_b.view_id)


def _cells(z) -> Tuple[torch.Tensor, Tuple[int, int]]:
    z = _as_tensor(z)
    if z.ndim != 3:
        raise ValueError(f"feature maps must be (D, H, W), got shape {tuple(z.shape)}")
    d, h, w = z.shape
    return z.reshape(d, h * w).T, (h, w)


def feature_match(z_a, z_b, normalize: bool = False,
                  src_view: int = 0, dst_view: int = 1) -> MatchSet:
    """Match every cell of ``z_a`` (D x H x W) to the l2-closest cell vector of ``z_b``."""
    a, shape_a = _cells(z_a)
    b, shape_b = _cells(z_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    if normalize:
        a = torch.nn.functional.normalize(a, dim=-1)
        b = torch.nn.functional.normalize(b, dim=-1)
    idx, dist = nearest(a, b)
    return MatchSet(np.arange(len(a)), idx.numpy(), dist.numpy(), shape_a, shape_b,
                    src_view, dst_view)


def top_gamma(m: MatchSet, gamma: int) -> MatchSet:
    """Keep the ``min(gamma, len(m))`` pairs with the smallest distances."""
    keep = select_best(torch.as_tensor(m.dist), gamma).numpy()
    return MatchSet(m.src[keep], m.dst[keep], m.dist[keep], m.src_shape, m.dst_shape,
                    m.src_view, m.dst_view)


@torch.no_grad()
def batch_matches(
    src: torch.Tensor,
    dst: torch.Tensor,
    gamma: int,
    normalize: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Top-gamma nearest-neighbour pairs for a batch of point sets.

    ``src`` is ``(B, N, k)`` and ``dst`` is ``(B, M, k)``; these are either
    flattened position grids or flattened feature maps. Returns
    ``(src_idx, dst_idx, dist)``, each ``(B, min(gamma, N))``.
    """
    src, dst = src.detach(), dst.detach()
    if normalize:
        src = torch.nn.functional.normalize(src, dim=-1)
        dst = torch.nn.functional.normalize(dst, dim=-1)
    idx, dist = nearest(src, dst)
    keep = select_best(dist, gamma)
    return keep, torch.gather(idx, 1, keep), torch.gather(dist, 1, keep)


def matchsets_to_indices(matches) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack per-sample ``MatchSet`` objects into ``(B, K)`` index tensors."""
    sizes = {len(m) for m in matches}
    if len(sizes) != 1:
        raise ValueError(f"all match sets must have the same size, got {sorted(sizes)}")
    src = torch.as_tensor(np.stack([m.src for m in matches]), dtype=torch.long)
    dst = torch.as_tensor(np.stack([m.dst for m in matches]), dtype=torch.long)
    return src, dst


def grid_tensor(grids, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """``(B, H*W, 2)`` tensor from a sequence of position grids."""
    return torch.as_tensor(np.stack([g.flat() for g in grids]), dtype=dtype or torch.float64)
