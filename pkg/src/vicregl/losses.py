"""VICReg criterion and its local (matched feature vector) extensions.

All functions take torch tensors and are differentiable with respect to the
embeddings. Match selection runs under ``no_grad``: gradients flow only
through the feature vectors that were selected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .geometry import PositionGrid
from .matching import MatchSet, batch_matches, grid_tensor, matchsets_to_indices


@dataclass
class VicregWeights:
    lambda_inv: float = 25.0
    mu_var: float = 25.0
    nu_cov: float = 1.0

    def __post_init__(self):
        if min(self.lambda_inv, self.mu_var, self.nu_cov) < 0:
            raise ValueError(f"VICReg weights must be nonnegative: {self}")


@dataclass
class LossBreakdown:
    """Per-term values of one loss evaluation.

    ``variance`` and ``covariance`` already sum over both branches, so
    ``global_vicreg = lambda * invariance + mu * variance + nu * covariance``.
    ``local_location`` and ``local_feature`` hold both matching directions and
    ``total = alpha * global_vicreg + (1 - alpha) * (location_weight *
    local_location + feature_weight * local_feature)``.
    """

    invariance: torch.Tensor
    variance: torch.Tensor
    covariance: torch.Tensor
    global_vicreg: torch.Tensor
    local_location: torch.Tensor
    local_feature: torch.Tensor
    total: torch.Tensor
    alpha: float = 1.0
    weights: VicregWeights = field(default_factory=VicregWeights)
    location_weight: float = 1.0
    feature_weight: float = 1.0

    TERMS = ("invariance", "variance", "covariance", "global_vicreg",
             "local_location", "local_feature", "total")

    def as_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in self.TERMS}

    def effective_weights(self) -> Dict[str, float]:
        """Coefficient of each raw component in ``total``; zero for a disabled term."""
        w, a = self.weights, self.alpha
        return {"invariance": a * w.lambda_inv, "variance": a * w.mu_var, "covariance": a * w.nu_cov,
                "local_location": (1 - a) * self.location_weight,
                "local_feature": (1 - a) * self.feature_weight}

    def reconstruct(self) -> float:
        """Recombine the stored components into the total."""
        w = self.weights
        glob = w.lambda_inv * float(self.invariance) + w.mu_var * float(self.variance) \
            + w.nu_cov * float(self.covariance)
        local = self.location_weight * float(self.local_location) \
            + self.feature_weight * float(self.local_feature)
        return self.alpha * glob + (1 - self.alpha) * local


def _check_batch(z: torch.Tensor, name: str = "Z") -> None:
    if z.ndim != 2:
        raise ValueError(f"{name} must be a (N, D) batch, got shape {tuple(z.shape)}")
    if z.shape[0] < 2:
        raise ValueError(f"{name} needs at least 2 rows for variance/covariance, got {z.shape[0]}")


def invariance_term(z: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all elements."""
    if z.shape != z2.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z2.shape)}")
    return F.mse_loss(z, z2)


def variance_term(z: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Hinge on the per-dimension standard deviation, averaged over dimensions."""
    _check_batch(z)
    std = torch.sqrt(z.var(dim=0) + eps)
    return torch.relu(1.0 - std).mean()


def off_diagonal(m: torch.Tensor) -> torch.Tensor:
    n = m.shape[0]
    return m.flatten()[:-1].view(n - 1, n + 1)[:, 1:].flatten()


def covariance_term(z: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal covariance entries divided by the dimension."""
    _check_batch(z)
    n, d = z.shape
    zc = z - z.mean(dim=0)
    cov = (zc.T @ zc) / (n - 1)
    return off_diagonal(cov).pow(2).sum() / d


def vicreg_terms(z: torch.Tensor, z2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Unweighted ``(invariance, variance, covariance)``, the last two summed over branches."""
    _check_batch(z, "Z")
    _check_batch(z2, "Z2")
    inv = invariance_term(z, z2)
    var = variance_term(z) + variance_term(z2)
    cov = covariance_term(z) + covariance_term(z2)
    return inv, var, cov


def _combine(inv, var, cov, w: VicregWeights) -> torch.Tensor:
    return w.lambda_inv * inv + w.mu_var * var + w.nu_cov * cov


def vicreg_loss(z: torch.Tensor, z2: torch.Tensor, w: Optional[VicregWeights] = None) -> LossBreakdown:
    """VICReg criterion between two batches of embeddings."""
    w = w or VicregWeights()
    inv, var, cov = vicreg_terms(z, z2)
    glob = _combine(inv, var, cov, w)
    zero = torch.zeros((), dtype=glob.dtype)
    return LossBreakdown(inv, var, cov, glob, zero, zero, glob, 1.0, w)


def vicreg_scalar(z: torch.Tensor, z2: torch.Tensor, w: VicregWeights) -> torch.Tensor:
    return _combine(*vicreg_terms(z, z2), w)


def _cells(z: torch.Tensor) -> torch.Tensor:
    """``(B, D, H, W) -> (B, H*W, D)``."""
    if z.ndim == 3:
        z = z.unsqueeze(0)
    if z.ndim != 4:
        raise ValueError(f"feature maps must be (B, D, H, W), got shape {tuple(z.shape)}")
    return z.flatten(2).transpose(1, 2)


def gather_pairs(a: torch.Tensor, b: torch.Tensor, src_idx: torch.Tensor,
                 dst_idx: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack matched source and target vectors of a batch into ``(B*K, D)`` matrices."""
    d = a.shape[-1]
    src = torch.gather(a, 1, src_idx.unsqueeze(-1).expand(-1, -1, d))
    dst = torch.gather(b, 1, dst_idx.unsqueeze(-1).expand(-1, -1, d))
    return src.reshape(-1, d), dst.reshape(-1, d)


def local_loss(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    matches: Union[Sequence[MatchSet], Tuple[torch.Tensor, torch.Tensor]],
    w: Optional[VicregWeights] = None,
) -> torch.Tensor:
    """VICReg between matched feature vectors of two batches of maps.

    ``matches`` is either one (already filtered) ``MatchSet`` per batch element
    or a pair of ``(B, K)`` flat index tensors. All kept pairs of the batch
    form one population of ``B * K`` rows.
    """
    w = w or VicregWeights()
    a, b = _cells(z_a), _cells(z_b)
    if isinstance(matches, tuple) and isinstance(matches[0], torch.Tensor):
        src_idx, dst_idx = matches
    else:
        if isinstance(matches, MatchSet):
            matches = [matches]
        src_idx, dst_idx = matchsets_to_indices(matches)
    if src_idx.shape[0] != a.shape[0]:
        raise ValueError(f"got matches for {src_idx.shape[0]} maps but {a.shape[0]} maps")
    if src_idx.numel() < 2:
        raise ValueError(f"local loss needs at least 2 matched pairs, got {src_idx.numel()}")
    src, dst = gather_pairs(a, b, src_idx, dst_idx)
    return vicreg_scalar(src, dst, w)


GridLike = Union[torch.Tensor, Sequence[PositionGrid]]


def _grid_cells(grid: GridLike) -> torch.Tensor:
    if isinstance(grid, torch.Tensor):
        g = grid if grid.ndim == 4 else grid.unsqueeze(0)
        return g.reshape(g.shape[0], -1, 2)
    if isinstance(grid, PositionGrid):
        grid = [grid]
    return grid_tensor(grid)


def location_loss(z_a, z_b, grid_a: GridLike, grid_b: GridLike, gamma: int,
                  w: VicregWeights) -> torch.Tensor:
    """Local loss over the top-gamma spatial nearest neighbours from ``a`` into ``b``."""
    src_idx, dst_idx, _ = batch_matches(_grid_cells(grid_a), _grid_cells(grid_b), gamma)
    return local_loss(z_a, z_b, (src_idx, dst_idx), w)


def feature_loss(z_a, z_b, gamma: int, w: VicregWeights, normalize: bool = False) -> torch.Tensor:
    """Local loss over the top-gamma embedding-space nearest neighbours from ``a`` into ``b``."""
    a, b = _cells(z_a), _cells(z_b)
    src_idx, dst_idx, _ = batch_matches(a, b, gamma, normalize)
    return local_loss(z_a, z_b, (src_idx, dst_idx), w)


def _symmetric_local(z_a, z_b, grid_a, grid_b, gamma_ab: int, gamma_ba: int, w: VicregWeights,
                     use_location: bool, use_feature: bool, normalize: bool):
    zero = torch.zeros((), dtype=z_a.dtype)
    loc = feat = zero
    if use_location:
        loc = location_loss(z_a, z_b, grid_a, grid_b, gamma_ab, w) \
            + location_loss(z_b, z_a, grid_b, grid_a, gamma_ba, w)
    if use_feature:
        feat = feature_loss(z_a, z_b, gamma_ab, w, normalize) \
            + feature_loss(z_b, z_a, gamma_ba, w, normalize)
    return loc, feat


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _assemble(inv, var, cov, loc, feat, alpha, w, use_location, use_feature) -> LossBreakdown:
    glob = _combine(inv, var, cov, w)
    local = loc + feat
    total = alpha * glob + (1.0 - alpha) * local
    return LossBreakdown(inv, var, cov, glob, loc, feat, total, alpha, w,
                         float(use_location), float(use_feature))


def total_loss_two_view(
    z_a: torch.Tensor,
    z_b: torch.Tensor,
    g_a: torch.Tensor,
    g_b: torch.Tensor,
    grid_a: GridLike,
    grid_b: GridLike,
    alpha: float = 0.75,
    gamma: int = 20,
    w: Optional[VicregWeights] = None,
    *,
    use_location: bool = True,
    use_feature: bool = True,
    normalize: bool = False,
) -> LossBreakdown:
    """Global VICReg on pooled embeddings plus symmetrized location and feature losses.

    ``z_a``, ``z_b`` are projected maps ``(B, D, H, W)``; ``g_a``, ``g_b`` are
    global embeddings ``(B, E)``; ``grid_a``, ``grid_b`` are ``(B, H, W, 2)``
    coordinates or sequences of ``PositionGrid``.
    """
    _check_alpha(alpha)
    w = w or VicregWeights()
    inv, var, cov = vicreg_terms(g_a, g_b)
    loc, feat = _symmetric_local(z_a, z_b, grid_a, grid_b, gamma, gamma, w,
                                 use_location, use_feature, normalize)
    return _assemble(inv, var, cov, loc, feat, alpha, w, use_location, use_feature)


class View(NamedTuple):
    """One view of a multi-crop set."""

    local: torch.Tensor
    grid: GridLike
    global_emb: torch.Tensor
    is_large: bool


def view_pairs(is_large: Sequence[bool]) -> List[Tuple[int, int]]:
    """Unordered view pairs with at least one large view, in lexicographic order."""
    return [(m, n) for m, n in combinations(range(len(is_large)), 2) if is_large[m] or is_large[n]]


def total_loss_multicrop(
    views: Sequence[View],
    alpha: float = 0.75,
    gamma_large: int = 20,
    gamma_small: int = 4,
    w: Optional[VicregWeights] = None,
    *,
    use_location: bool = True,
    use_feature: bool = True,
    normalize: bool = False,
) -> LossBreakdown:
    """Multi-crop loss: every large view is paired with every other view.

    Each unordered pair contributes its global VICReg term and both directions
    of its location and feature losses once. Directions between two large maps
    keep ``gamma_large`` pairs; any direction involving a small map keeps
    ``gamma_small``.
    """
    _check_alpha(alpha)
    w = w or VicregWeights()
    views = [View(*v) for v in views]
    flags = [bool(v.is_large) for v in views]
    if sum(flags) != 2:
        raise ValueError(f"multi-crop needs exactly 2 large views, got {sum(flags)}")
    inv = var = cov = loc = feat = None
    for m, n in view_pairs(flags):
        vm, vn = views[m], views[n]
        gamma = gamma_large if vm.is_large and vn.is_large else gamma_small
        terms = vicreg_terms(vm.global_emb, vn.global_emb)
        local = _symmetric_local(vm.local, vn.local, vm.grid, vn.grid, gamma, gamma, w,
                                 use_location, use_feature, normalize)
        if inv is None:
            inv, var, cov = terms
            loc, feat = local
        else:
            inv, var, cov = inv + terms[0], var + terms[1], cov + terms[2]
            loc, feat = loc + local[0], feat + local[1]
    return _assemble(inv, var, cov, loc, feat, alpha, w, use_location, use_feature)
