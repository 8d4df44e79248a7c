"""Pretraining loop for the VICRegL criterion.

Randomness is derived from ``(seed, purpose, step)`` so that any step can be
recomputed without replaying earlier ones; this is what makes resumed runs
bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .config import TrainConfig, dump_config
from .data import ShapesDataset
from .geometry import ViewSampler, apply_view, position_grid
from .losses import (LossBreakdown, VicregWeights, View, total_loss_multicrop, total_loss_two_view,
                     view_pairs)
from .model import (Checkpoint, VICRegLNet, build_model, config_hash, load_checkpoint,
                    save_checkpoint)

logger = logging.getLogger(__name__)

_EPOCH_STREAM = 0
_VIEW_STREAM = 1


class NonFiniteLossError(RuntimeError):
    pass


def cosine_schedule(step: int, total_steps: int, warmup_steps: int,
                    base_lr: float, final_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``final_lr``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * progress))


def loss_weights(cfg: TrainConfig) -> VicregWeights:
    lc = cfg.loss
    return VicregWeights(lc.lambda_inv,
                         lc.mu_var if lc.use_variance else 0.0,
                         lc.nu_cov if lc.use_covariance else 0.0)


def view_sampler(cfg: TrainConfig) -> ViewSampler:
    mc = cfg.multicrop
    return ViewSampler(
        n_large=mc.n_large,
        n_small=mc.n_small if mc.enabled else 0,
        large_size=(mc.large_size, mc.large_size),
        small_size=(mc.small_size, mc.small_size),
        area_range=tuple(mc.area_range),
        small_area_range=tuple(mc.small_area_range),
        aspect_range=tuple(mc.aspect_range),
        flip_prob=mc.flip_prob,
        jitter=cfg.augment,
    )


@dataclass
class ViewBatch:
    """Rendered views of a batch: per view ``(B, 3, h, w)`` pixels and ``(B, H, W, 2)`` grids."""

    pixels: List[torch.Tensor]
    grids: List[torch.Tensor]
    is_large: List[bool]


def render_views(dataset: ShapesDataset, idx: Sequence[int], cfg: TrainConfig,
                 rng: np.random.Generator) -> ViewBatch:
    sampler = view_sampler(cfg)
    stride = cfg.encoder.output_stride
    n_views = sampler.n_large + sampler.n_small
    pixels: List[List[np.ndarray]] = [[] for _ in range(n_views)]
    grids: List[List[np.ndarray]] = [[] for _ in range(n_views)]
    for i in idx:
        sample = dataset[int(i)]
        for v, crop in enumerate(sampler.sample(rng, sample.dims)):
            pixels[v].append(apply_view(sample, crop, sampler.jitter, rng))
            grids[v].append(position_grid(crop, (crop.out_h // stride, crop.out_w // stride), v).coords)
    return ViewBatch(
        [torch.from_numpy(np.stack(p).astype(np.float32)) for p in pixels],
        [torch.from_numpy(np.stack(g)) for g in grids],
        [v < sampler.n_large for v in range(n_views)],
    )


@dataclass
class StepResult:
    breakdown: LossBreakdown
    stats: Dict[str, float]


def embed_views(model: VICRegLNet, batch: ViewBatch):
    """Run views through the model, batching views of equal resolution together.

    Returns per-view ``(projected map, global embedding)``.
    """
    groups: Dict[Tuple[int, int], List[int]] = {}
    for v, px in enumerate(batch.pixels):
        groups.setdefault(tuple(px.shape[-2:]), []).append(v)
    out: List[Optional[Tuple[torch.Tensor, torch.Tensor]]] = [None] * len(batch.pixels)
    for views in groups.values():
        x = torch.cat([batch.pixels[v] for v in views])
        _, z_local, z_global = model(x)
        for v, zl, zg in zip(views, z_local.chunk(len(views)), z_global.chunk(len(views))):
            out[v] = (zl, zg)
    return out


def compute_loss(model: VICRegLNet, batch: ViewBatch, cfg: TrainConfig):
    lc = cfg.loss
    w = loss_weights(cfg)
    embedded = embed_views(model, batch)
    flags = dict(use_location=lc.use_location, use_feature=lc.use_feature,
                 normalize=lc.normalize_feature_match)
    if len(embedded) == 2:
        (za, ga), (zb, gb) = embedded
        bd = total_loss_two_view(za, zb, ga, gb, batch.grids[0], batch.grids[1],
                                 lc.alpha, lc.gamma_large, w, **flags)
    else:
        views = [View(zl, g, zg, large) for (zl, zg), g, large
                 in zip(embedded, batch.grids, batch.is_large)]
        bd = total_loss_multicrop(views, lc.alpha, lc.gamma_large, lc.gamma_small, w, **flags)
    return bd, embedded


def std_stats(z: torch.Tensor) -> Tuple[float, float]:
    """Min and mean of the unbiased per-dimension standard deviation."""
    std = z.detach().double().std(dim=0)
    return float(std.min()), float(std.mean())


def train_step(model: VICRegLNet, optimizer: torch.optim.Optimizer, batch: ViewBatch,
               cfg: TrainConfig, lr: float) -> StepResult:
    """One optimizer update on the total loss of a rendered batch."""
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    bd, embedded = compute_loss(model, batch, cfg)
    if not torch.isfinite(bd.total):
        raise NonFiniteLossError(f"non-finite loss: {bd.as_dict()}")
    optimizer.zero_grad(set_to_none=True)
    bd.total.backward()
    optimizer.step()
    z_local, z_global = embedded[0]
    g_min, g_mean = std_stats(z_global)
    l_min, l_mean = std_stats(z_local.flatten(2).transpose(1, 2).reshape(-1, z_local.shape[1]))
    stats = {"std_min": g_min, "std_mean": g_mean, "local_std_min": l_min, "local_std_mean": l_mean}
    return StepResult(bd, stats)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    oc = cfg.optim
    if oc.kind == "sgd":
        return torch.optim.SGD(model.parameters(), lr=0.0, momentum=oc.momentum,
                               weight_decay=oc.weight_decay)
    return torch.optim.AdamW(model.parameters(), lr=0.0, betas=tuple(oc.betas),
                             weight_decay=oc.weight_decay)


def optimizer_arrays(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    names = [n for n, _ in model.named_parameters()]
    out = {}
    for i, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                out[f"{names[i]}/{key}"] = value.detach().cpu().numpy().copy()
    return out


def restore_optimizer(model: torch.nn.Module, optimizer: torch.optim.Optimizer,
                      arrays: Dict[str, np.ndarray]) -> None:
    index = {n: i for i, (n, _) in enumerate(model.named_parameters())}
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, value in arrays.items():
        name, field_name = key.rsplit("/", 1)
        state.setdefault(index[name], {})[field_name] = torch.from_numpy(value.copy())
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


class Trainer:
    """Holds model, optimizer and schedule for one pretraining run.

    With ``out_dir`` set, checkpoints go to ``out_dir/checkpoints`` and one
    JSON record per step is appended to ``out_dir/metrics.jsonl``.
    """

    def __init__(self, cfg: TrainConfig, dataset: ShapesDataset,
                 out_dir: Union[str, Path, None] = None):
        self.cfg = cfg.validate()
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.model = build_model(cfg.encoder, cfg.heads, seed=cfg.seed)
        self.optimizer = make_optimizer(self.model, cfg)
        self.step = 0
        self.steps_per_epoch = len(dataset) // cfg.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"dataset of {len(dataset)} samples is smaller than one batch")
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.warmup_steps = self.steps_per_epoch * cfg.optim.warmup_epochs
        self.hash = config_hash(cfg.to_dict())
        self.history: List[Dict[str, float]] = []

    # -- schedule and data ---------------------------------------------------

    @property
    def lr_scale(self) -> float:
        sampler = view_sampler(self.cfg)
        n_pairs = len(view_pairs([True] * sampler.n_large + [False] * sampler.n_small))
        return 1.0 / n_pairs if self.cfg.optim.scale_lr_by_pairs else 1.0

    def lr_at(self, step: int) -> float:
        oc = self.cfg.optim
        s = self.lr_scale
        return cosine_schedule(step, self.total_steps, self.warmup_steps, s * oc.base_lr, s * oc.final_lr)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.seed, _EPOCH_STREAM, epoch]).permutation(len(self.dataset))
        bs = self.cfg.batch_size
        return perm[pos * bs:(pos + 1) * bs]

    def views_at(self, step: int) -> ViewBatch:
        rng = np.random.default_rng([self.cfg.seed, _VIEW_STREAM, step])
        return render_views(self.dataset, self.batch_indices(step), self.cfg, rng)

    # -- checkpoints -----------------------------------------------------------

    @property
    def ckpt_dir(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "checkpoints"

    @property
    def metrics_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "metrics.jsonl"

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_state(self.model, optimizer_arrays(self.model, self.optimizer),
                                     self.step, self.hash)

    def save(self) -> Optional[Path]:
        if self.ckpt_dir is None:
            return None
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = self.ckpt_dir / f"ckpt_{self.step:07d}.vrgl"
        save_checkpoint(self.checkpoint(), path)
        return path

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.hash:
            raise ValueError("checkpoint was written with a different configuration")
        ckpt.load_into(self.model)
        restore_optimizer(self.model, self.optimizer, ckpt.optim_state())
        self.step = ckpt.step

    def latest_checkpoint(self) -> Optional[Path]:
        if self.ckpt_dir is None or not self.ckpt_dir.exists():
            return None
        found = sorted(self.ckpt_dir.glob("ckpt_*.vrgl"))
        return found[-1] if found else None

    def resume(self) -> bool:
        """Continue from the newest checkpoint in ``out_dir``, dropping later metrics."""
        path = self.latest_checkpoint()
        if path is None:
            return False
        self.restore(load_checkpoint(path))
        if self.metrics_path is not None and self.metrics_path.exists():
            lines = self.metrics_path.read_text().splitlines()
            kept = [ln for ln in lines if ln and json.loads(ln)["step"] < self.step]
            self.metrics_path.write_text("".join(ln + "\n" for ln in kept))
            self.history = [json.loads(ln) for ln in kept]
        logger.info("resumed from %s at step %d", path, self.step)
        return True

    # -- loop ------------------------------------------------------------------

    def run_step(self) -> Dict[str, float]:
        lr = self.lr_at(self.step)
        result = train_step(self.model, self.optimizer, self.views_at(self.step), self.cfg, lr)
        record = {"step": self.step, "epoch": self.step // self.steps_per_epoch, "lr": lr}
        record.update(result.breakdown.as_dict())
        record.update({f"weight_{k}": v for k, v in result.breakdown.effective_weights().items()})
        record.update(result.stats)
        self.step += 1
        self.history.append(record)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        return record

    def fit(self, max_steps: Optional[int] = None) -> Checkpoint:
        """Train until ``total_steps`` (or ``max_steps`` more steps) and return the final checkpoint."""
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            dump_config(self.cfg, self.out_dir / "config.yaml")
            if self.step == 0 and not (self.ckpt_dir / f"ckpt_{0:07d}.vrgl").exists():
                if self.metrics_path.exists():
                    self.metrics_path.unlink()
                self.save()
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        every = self.cfg.checkpoint_every
        while self.step < stop:
            record = self.run_step()
            if self.cfg.log_every and record["step"] % self.cfg.log_every == 0:
                logger.info("step %d lr %.5f total %.4f global %.4f loc %.4f feat %.4f std_min %.3f",
                            record["step"], record["lr"], record["total"], record["global_vicreg"],
                            record["local_location"], record["local_feature"], record["std_min"])
            if every and self.step % every == 0 and self.step < self.total_steps:
                self.save()
        if self.step == self.total_steps and self.total_steps > 0:
            self.save()
        return self.checkpoint()


def pretrain(cfg: TrainConfig, dataset: ShapesDataset, out_dir: Union[str, Path, None] = None,
             resume: bool = True) -> Tuple[Checkpoint, List[Dict[str, float]]]:
    """Run (or resume) a full pretraining and return the final checkpoint and metrics."""
    trainer = Trainer(cfg, dataset, out_dir)
    if resume:
        trainer.resume()
    ckpt = trainer.fit()
    return ckpt, trainer.history
