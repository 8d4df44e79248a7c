"""Independent oracles and the self-check suite behind ``vicregl verify``.

The oracles here are deliberately naive: Python loops over cells and
coordinates, sharing no code with the vectorized implementations they check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import losses
from .geometry import CropRect, position_grid
from .losses import VicregWeights, View


# -- finite differences ---------------------------------------------------------

class NonFiniteEvaluation(FloatingPointError):
    pass


def finite_diff_check(
    fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    point: Dict[str, np.ndarray],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    directions: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest relative error between autograd and central-difference gradients.

    ``fn`` maps named float64 tensors to a scalar. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. With ``max_coords`` only
    that many randomly chosen coordinates per tensor are probed; each of the
    ``directions`` random unit directions then checks the directional
    derivative over all coordinates jointly.
    """
    if (max_coords is not None or directions) and rng is None:
        raise ValueError("coordinate sampling and directional checks need an rng")
    inputs = {k: torch.tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
              for k, v in point.items()}
    out = fn(inputs)
    if not torch.isfinite(out):
        raise NonFiniteEvaluation(f"function is not finite at the base point: {float(out)}")
    grads = torch.autograd.grad(out, list(inputs.values()), allow_unused=True)
    fixed = {k: v.detach() for k, v in inputs.items()}
    analytic = {name: np.zeros(np.shape(base)) if g is None else g.numpy()
                for (name, base), g in zip(point.items(), grads)}

    def central(moves: Dict[str, torch.Tensor], label: str) -> float:
        vals = []
        for sign in (1.0, -1.0):
            moved = dict(fixed)
            for name, delta in moves.items():
                moved[name] = fixed[name] + sign * step * delta
            with torch.no_grad():
                val = float(fn(moved))
            if not math.isfinite(val):
                raise NonFiniteEvaluation(f"non-finite value moving {label} by {sign * step}")
            vals.append(val)
        return (vals[0] - vals[1]) / (2 * step)

    def rel(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    for name, base in point.items():
        shape = np.shape(base)
        size = int(np.prod(shape, dtype=np.int64))
        flat = np.arange(size)
        if max_coords is not None and size > max_coords:
            flat = np.sort(rng.choice(size, max_coords, replace=False))
        for k in flat:
            idx = np.unravel_index(k, shape)
            delta = torch.zeros(shape, dtype=torch.float64)
            delta[idx] = 1.0
            worst = max(worst, rel(float(analytic[name][idx]), central({name: delta}, f"{name}{list(idx)}")))
    for d in range(directions):
        dirs = {name: rng.normal(size=np.shape(base)) for name, base in point.items()}
        norm = math.sqrt(sum(float((u ** 2).sum()) for u in dirs.values()))
        dirs = {name: u / norm for name, u in dirs.items()}
        a = sum(float((analytic[name] * u).sum()) for name, u in dirs.items())
        n = central({name: torch.from_numpy(u) for name, u in dirs.items()}, f"direction {d}")
        worst = max(worst, rel(a, n))
    return worst


# -- matching oracles ---------------------------------------------------------

def exhaustive_match(src_points: Sequence[Sequence[float]],
                     dst_points: Sequence[Sequence[float]]) -> List[Tuple[int, int, float]]:
    """All-pairs scan: ``(src, dst, dist)`` for every source point, first minimum wins."""
    out = []
    for i, p in enumerate(src_points):
        best_j, best_d = -1, math.inf
        for j, q in enumerate(dst_points):
            d = math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(p, q)))
            if d < best_d:
                best_j, best_d = j, d
        out.append((i, best_j, best_d))
    return out


def exhaustive_location_match(coords_a: np.ndarray, coords_b: np.ndarray):
    """Oracle for location matching on ``(H, W, 2)`` coordinate arrays."""
    a = [tuple(c) for row in coords_a for c in row]
    b = [tuple(c) for row in coords_b for c in row]
    return exhaustive_match(a, b)


def exhaustive_feature_match(z_a: np.ndarray, z_b: np.ndarray):
    """Oracle for feature matching on ``(D, H, W)`` maps."""
    d, h, w = z_a.shape
    a = [[float(z_a[k, i, j]) for k in range(d)] for i in range(h) for j in range(w)]
    d2, h2, w2 = z_b.shape
    b = [[float(z_b[k, i, j]) for k in range(d2)] for i in range(h2) for j in range(w2)]
    return exhaustive_match(a, b)


def exhaustive_top_gamma(pairs: Sequence[Tuple[int, int, float]], gamma: int):
    """Oracle for top-gamma selection: sort by (dist, src) and truncate."""
    return sorted(pairs, key=lambda p: (p[2], p[0]))[:gamma]


# -- loss oracles ---------------------------------------------------------------

def loop_invariance(z: np.ndarray, z2: np.ndarray) -> float:
    total = 0.0
    n, d = len(z), len(z[0])
    for i in range(n):
        for k in range(d):
            total += (float(z[i][k]) - float(z2[i][k])) ** 2
    return total / (n * d)


def _loop_mean(z, k):
    return sum(float(row[k]) for row in z) / len(z)


def loop_variance(z: np.ndarray, eps: float = 1e-4) -> float:
    n, d = len(z), len(z[0])
    total = 0.0
    for k in range(d):
        mu = _loop_mean(z, k)
        var = sum((float(row[k]) - mu) ** 2 for row in z) / (n - 1)
        total += max(0.0, 1.0 - math.sqrt(var + eps))
    return total / d


def loop_covariance(z: np.ndarray) -> float:
    n, d = len(z), len(z[0])
    mus = [_loop_mean(z, k) for k in range(d)]
    total = 0.0
    for k in range(d):
        for l in range(d):
            if k == l:
                continue
            c = sum((float(row[k]) - mus[k]) * (float(row[l]) - mus[l]) for row in z) / (n - 1)
            total += c * c
    return total / d


def loop_vicreg(z, z2, lam=25.0, mu=25.0, nu=1.0) -> float:
    return lam * loop_invariance(z, z2) + mu * (loop_variance(z) + loop_variance(z2)) \
        + nu * (loop_covariance(z) + loop_covariance(z2))


def collapse_monitor(z) -> Tuple[float, float]:
    """``(min, mean)`` over dimensions of the unbiased per-dimension std."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise ValueError("collapse monitor needs a (N, D) batch with N >= 2")
    std = z.std(axis=0, ddof=1)
    return float(std.min()), float(std.mean())


# -- random instances ------------------------------------------------------------

def random_crop(rng: np.random.Generator, size: int = 64, out: int = 32) -> CropRect:
    w = rng.uniform(0.3, 1.0) * size
    h = rng.uniform(0.3, 1.0) * size
    return CropRect(rng.uniform(0, size - w), rng.uniform(0, size - h), w, h,
                    bool(rng.random() < 0.5), out, out)


def _away_from_kinks(fn, point, margin: float = 1e-3) -> bool:
    """True when no variance hinge sits within ``margin`` of its kink."""
    for z in fn(point):
        std = np.sqrt(np.var(z, axis=0, ddof=1) + 1e-4)
        if np.any(np.abs(std - 1.0) < margin):
            return False
    return True


def _feature_margin(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest gap between best and second-best feature match distances.

    Rows are cells of flattened ``(N, D)`` maps.
    """
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    if d.shape[1] < 2:
        return math.inf
    part = np.sort(d, axis=1)
    best = part[:, 0]
    gaps = part[:, 1] - best
    order = np.sort(best)
    ranked_gap = np.diff(order).min() if len(order) > 1 else math.inf
    return float(min(gaps.min(), ranked_gap))


def two_view_instance(rng: np.random.Generator, batch: int = 4, dim: int = 6, hw: int = 3,
                      emb: int = 5):
    point = {
        "z_a": rng.normal(size=(batch, dim, hw, hw)) * 0.7,
        "z_b": rng.normal(size=(batch, dim, hw, hw)) * 0.7,
        "g_a": rng.normal(size=(batch, emb)) * 0.7,
        "g_b": rng.normal(size=(batch, emb)) * 0.7,
    }
    grids = [torch.tensor(np.stack([position_grid(random_crop(rng), (hw, hw)).coords
                                    for _ in range(batch)])) for _ in range(2)]
    return point, grids


def _well_conditioned(point, gamma) -> bool:
    """Feature matches and top-gamma ranks are stable under a 1e-5 perturbation."""
    for a_key, b_key in (("z_a", "z_b"), ("z_b", "z_a")):
        za, zb = point[a_key], point[b_key]
        for i in range(len(za)):
            a = za[i].reshape(za.shape[1], -1).T
            b = zb[i].reshape(zb.shape[1], -1).T
            if _feature_margin(a, b) < 1e-3:
                return False
    return True


# -- the suite ----------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} {self.seconds:6.2f}s  {self.detail}"


def _check(name: str, group: str, fn: Callable[[], Tuple[bool, str]]) -> CheckResult:
    t = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as e:  # a crashing check is a failing check
        ok, detail = False, f"{type(e).__name__}: {e}"
    return CheckResult(name, group, bool(ok), detail, time.perf_counter() - t)


def grad_vicreg(seed: int = 0, n: int = 20, tol: float = 1e-4) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    w = VicregWeights()
    while done < n:
        point = {"z": rng.normal(size=(4, 6)) * 0.6, "z2": rng.normal(size=(4, 6)) * 0.6}
        if not _away_from_kinks(lambda p: [p["z"], p["z2"]], point):
            continue
        worst = max(worst, finite_diff_check(
            lambda t: losses.vicreg_loss(t["z"], t["z2"], w).total, point))
        done += 1
    return worst < tol, f"max rel err {worst:.2e} over {n} instances"


def _two_view_fn(grids, alpha, gamma):
    def fn(t):
        return losses.total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], grids[0], grids[1],
                                          alpha, gamma).total
    return fn


def _local_kinks(point, grids, gamma):
    """Matrices that enter variance hinges for the given instance."""
    mats = [point["g_a"], point["g_b"]]
    za, zb = (torch.tensor(point[k]) for k in ("z_a", "z_b"))
    ga, gb = grids
    for src, dst, g_src, g_dst in ((za, zb, ga, gb), (zb, za, gb, ga)):
        for keys in ((losses._grid_cells(g_src), losses._grid_cells(g_dst)),
                     (losses._cells(src), losses._cells(dst))):
            s, d, _ = losses.batch_matches(keys[0], keys[1], gamma)
            a, b = losses.gather_pairs(losses._cells(src), losses._cells(dst), s, d)
            mats += [a.numpy(), b.numpy()]
    return mats


def grad_two_view(seed: int = 1, n: int = 20, tol: float = 1e-4) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        point, grids = two_view_instance(rng)
        gamma = int(rng.integers(2, 10))
        alpha = float(rng.uniform(0.2, 0.9))
        if not _well_conditioned(point, gamma):
            continue
        if not _away_from_kinks(lambda p: _local_kinks(p, grids, gamma), point):
            continue
        worst = max(worst, finite_diff_check(_two_view_fn(grids, alpha, gamma), point,
                                              max_coords=24, directions=4, rng=rng))
        done += 1
    return worst < tol, f"max rel err {worst:.2e} over {n} instances"


def multicrop_instance(rng: np.random.Generator, batch: int = 4, dim: int = 5, emb: int = 4,
                       n_small: int = 2, large_hw: int = 3, small_hw: int = 2):
    point, views = {}, []
    for v in range(2 + n_small):
        hw = large_hw if v < 2 else small_hw
        point[f"z{v}"] = rng.normal(size=(batch, dim, hw, hw)) * 0.7
        point[f"g{v}"] = rng.normal(size=(batch, emb)) * 0.7
        views.append(torch.tensor(np.stack([position_grid(random_crop(rng, out=hw * 8), (hw, hw)).coords
                                            for _ in range(batch)])))
    return point, views


def _multicrop_fn(grids, alpha, g1, g2):
    def fn(t):
        views = [View(t[f"z{v}"], grids[v], t[f"g{v}"], v < 2) for v in range(len(grids))]
        return losses.total_loss_multicrop(views, alpha, g1, g2).total
    return fn


def grad_multicrop(seed: int = 2, n: int = 20, tol: float = 1e-4) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        point, grids = multicrop_instance(rng)
        n_views = len(grids)
        ok = True
        for m, k in losses.view_pairs([v < 2 for v in range(n_views)]):
            sub = {"z_a": point[f"z{m}"], "z_b": point[f"z{k}"], "g_a": point[f"g{m}"], "g_b": point[f"g{k}"]}
            gamma = 6 if (m < 2 and k < 2) else 3
            if not _well_conditioned(sub, gamma) or not _away_from_kinks(
                    lambda p: _local_kinks(p, (grids[m], grids[k]), gamma), sub):
                ok = False
                break
        if not ok:
            continue
        worst = max(worst, finite_diff_check(_multicrop_fn(grids, 0.6, 6, 3), point,
                                              max_coords=8, directions=4, rng=rng))
        done += 1
    return worst < tol, f"max rel err {worst:.2e} over {n} instances"


def grad_heads(seed: int = 3, n: int = 5, tol: float = 1e-4) -> Tuple[bool, str]:
    from .model import GlobalExpander, LocalProjector, init_weights

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        expander = GlobalExpander([6, 8, 8, 5]).double()
        projector = LocalProjector([6, 7, 4]).double()
        init_weights(expander, seed + i)
        init_weights(projector, seed + i)
        point = {"v": rng.normal(size=(5, 6)), "y": rng.normal(size=(3, 6, 2, 2))}

        def fn(t):
            return (expander(t["v"]) ** 2).sum() * 0.1 + projector(t["y"]).sin().sum()
        worst = max(worst, finite_diff_check(fn, point))
    return worst < tol, f"max rel err {worst:.2e} over {n} instances"


def _to_pairs(m):
    return [(int(s), int(d), float(x)) for s, d, x in zip(m.src, m.dst, m.dist)]


def _same_pairs(got, want, tol=1e-12) -> bool:
    return len(got) == len(want) and all(
        g[0] == w[0] and g[1] == w[1] and abs(g[2] - w[2]) <= tol * max(1.0, abs(w[2]))
        for g, w in zip(got, want))


def match_location(seed: int = 4, n: int = 1000) -> Tuple[bool, str]:
    from .matching import location_match

    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(n):
        shapes = [(7, 7), (3, 3)] if i % 2 else [tuple(rng.integers(1, 6, size=2)) for _ in range(2)]
        grids = [position_grid(random_crop(rng, 224, 224), s, v) for v, s in enumerate(shapes)]
        got = _to_pairs(location_match(*grids))
        want = exhaustive_location_match(grids[0].coords, grids[1].coords)
        bad += not _same_pairs(got, want)
    return bad == 0, f"{n - bad}/{n} instances agree"


def match_feature(seed: int = 5, n: int = 1000) -> Tuple[bool, str]:
    from .matching import feature_match

    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(n):
        d = int(rng.integers(1, 9))
        if i % 2:
            za, zb = rng.normal(size=(d, 7, 7)), rng.normal(size=(d, 3, 3))
        else:
            za = rng.normal(size=(d, *rng.integers(1, 5, size=2)))
            zb = rng.normal(size=(d, *rng.integers(1, 5, size=2)))
        got = _to_pairs(feature_match(za, zb))
        bad += not _same_pairs(got, exhaustive_feature_match(za, zb))
    return bad == 0, f"{n - bad}/{n} instances agree"


def match_top_gamma(seed: int = 6, n: int = 1000) -> Tuple[bool, str]:
    from .matching import feature_match, location_match, top_gamma

    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(n):
        if i % 2:
            m = feature_match(rng.normal(size=(4, 7, 7)), rng.normal(size=(4, 3, 3)))
            gamma = int(rng.integers(1, 60))
        else:
            g = [position_grid(random_crop(rng, 224, 224), s) for s in ((7, 7), (3, 3))]
            m = location_match(g[i % 4 == 0], g[i % 4 != 0])
            gamma = int(rng.integers(1, 12))
        got = _to_pairs(top_gamma(m, gamma))
        bad += not _same_pairs(got, exhaustive_top_gamma(_to_pairs(m), gamma), tol=0.0)
    return bad == 0, f"{n - bad}/{n} instances agree"


def loss_values(seed: int = 7) -> Tuple[bool, str]:
    const = torch.ones(5, 3, dtype=torch.float64) * 0.3
    v = float(losses.variance_term(const))
    c = float(losses.covariance_term(torch.tensor([[1.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)))
    rng = np.random.default_rng(seed)
    z, z2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    impl = float(losses.vicreg_loss(torch.tensor(z), torch.tensor(z2)).total)
    oracle = loop_vicreg(z, z2)
    ok = abs(v - 0.99) <= 1e-9 and abs(c - 4.0) <= 1e-9 and abs(impl - oracle) <= 1e-10 * abs(oracle)
    return ok, f"variance {v!r}, covariance {c!r}, vicreg {impl:.12g} vs loop {oracle:.12g}"


def alpha_one(seed: int = 8, n: int = 20) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(n):
        point, grids = two_view_instance(rng)
        t = {k: torch.tensor(v) for k, v in point.items()}
        bd = losses.total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], grids[0], grids[1], 1.0, 4)
        pure = losses.vicreg_loss(t["g_a"], t["g_b"]).total
        if not torch.equal(bd.total, pure):
            return False, f"alpha=1 total {float(bd.total)!r} != vicreg {float(pure)!r}"
    return True, f"{n} instances bit-identical"


def degenerate_multicrop(seed: int = 9, n: int = 100, tol: float = 1e-12) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        point, grids = two_view_instance(rng, hw=int(rng.integers(2, 5)))
        t = {k: torch.tensor(v) for k, v in point.items()}
        alpha, gamma = float(rng.uniform()), int(rng.integers(1, 17))
        two = losses.total_loss_two_view(t["z_a"], t["z_b"], t["g_a"], t["g_b"], grids[0], grids[1],
                                         alpha, gamma).total
        multi = losses.total_loss_multicrop(
            [View(t["z_a"], grids[0], t["g_a"], True), View(t["z_b"], grids[1], t["g_b"], True)],
            alpha, gamma, 1).total
        worst = max(worst, abs(float(two) - float(multi)) / max(1.0, abs(float(two))))
    return worst <= tol, f"max rel diff {worst:.1e} over {n} instances"


def geometry_props(seed: int = 10, n: int = 1000) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(n):
        crop = random_crop(rng, 224, 224)
        hw = tuple(int(x) for x in rng.integers(1, 9, size=2))
        g = position_grid(crop, hw).coords
        inside = (g[..., 0] >= crop.y0) & (g[..., 0] <= crop.y0 + crop.crop_h) \
            & (g[..., 1] >= crop.x0) & (g[..., 1] <= crop.x0 + crop.crop_w)
        if not inside.all():
            return False, f"grid escapes crop {crop}"
        plain = CropRect(crop.x0, crop.y0, crop.crop_w, crop.crop_h, False, crop.out_h, crop.out_w)
        flipped = CropRect(crop.x0, crop.y0, crop.crop_w, crop.crop_h, True, crop.out_h, crop.out_w)
        if not np.array_equal(position_grid(flipped, hw).coords, position_grid(plain, hw).coords[:, ::-1]):
            return False, f"flip is not a column reversal for {crop}"
        dy, dx = rng.uniform(-20, 20, size=2)
        moved = position_grid(crop.translated(dy, dx), hw).coords
        if not np.allclose(moved - g, [dy, dx], rtol=0, atol=1e-9):
            return False, f"grid not translation-equivariant for {crop}"
    full = position_grid(CropRect(0, 0, 224, 224, False, 224, 224), (7, 7)).coords
    expect = (np.arange(7) + 0.5) * 32
    if not (np.array_equal(full[0, :, 1], expect) and np.array_equal(full[:, 0, 0], expect)):
        return False, "224/7x7 grid centers differ from (k+0.5)*32"
    return True, f"{n} random crops"


CHECKS: List[Tuple[str, str, Callable[[], Tuple[bool, str]]]] = [
    ("grad_vicreg", "grad", grad_vicreg),
    ("grad_two_view", "grad", grad_two_view),
    ("grad_multicrop", "grad", grad_multicrop),
    ("grad_heads", "grad", grad_heads),
    ("match_location", "match", match_location),
    ("match_feature", "match", match_feature),
    ("match_top_gamma", "match", match_top_gamma),
    ("loss_values", "loss", loss_values),
    ("alpha_one", "loss", alpha_one),
    ("degenerate_multicrop", "loss", degenerate_multicrop),
    ("geometry", "geometry", geometry_props),
]


def run_suite(filter: Optional[str] = None) -> List[CheckResult]:
    """Run every check whose name or group contains ``filter``."""
    selected = [c for c in CHECKS if filter is None or filter in c[0] or filter == c[1]]
    return [_check(name, group, fn) for name, group, fn in selected]
