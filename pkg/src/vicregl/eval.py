"""Frozen-backbone linear probes for classification and segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import ShapesDataset
from .model import VICRegLNet, parameter_checksum

DEFAULT_LRS = (1.0, 0.3, 0.1, 0.03)


@dataclass
class ProbeConfig:
    lrs: Sequence[float] = DEFAULT_LRS
    epochs: int = 30
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    holdout: float = 0.25
    multi_stage: bool = False
    seed: int = 0


@dataclass
class ProbeResult:
    metric: str
    value: float
    per_class: Dict[int, float] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value,
                "per_class": {str(k): v for k, v in self.per_class.items()}, "config": self.config}


# -- metrics -------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth must have the same shape")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} has class ids outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def per_class_iou(conf: np.ndarray) -> Dict[int, float]:
    """IoU of every class that occurs in the prediction or the ground truth."""
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    return {k: float(inter[k] / union[k]) for k in range(len(conf)) if union[k] > 0}


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes, skipping classes absent from both masks."""
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")
    ious = per_class_iou(confusion_matrix(pred, gt, num_classes))
    return float(np.mean(list(ious.values()))) if ious else 1.0


def upsample(logits: torch.Tensor, size) -> torch.Tensor:
    """Bilinear upsampling with half-pixel alignment."""
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


# -- estimators -------------------------------------------------------------------

class _Standardize:
    def __init__(self, x: torch.Tensor, dims):
        self.mean = x.mean(dim=dims, keepdim=True)
        self.std = x.std(dim=dims, keepdim=True) + 1e-6

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Single linear layer on fixed representations, trained by SGD on cross-entropy."""

    def __init__(self, lr=0.1, epochs=30, batch_size=128, momentum=0.9, weight_decay=0.0, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        x = torch.from_numpy(X)
        self.scaler_ = _Standardize(x, 0)
        x = self.scaler_(x)
        target = torch.from_numpy(y_idx.astype(np.int64))
        gen = torch.Generator().manual_seed(self.seed)
        self.linear_ = torch.nn.Linear(x.shape[1], len(self.classes_))
        torch.nn.init.zeros_(self.linear_.weight)
        torch.nn.init.zeros_(self.linear_.bias)
        opt = torch.optim.SGD(self.linear_.parameters(), lr=self.lr, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        steps = self.epochs * max(1, -(-len(x) // self.batch_size))
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        for _ in range(self.epochs):
            perm = torch.randperm(len(x), generator=gen)
            for i in range(0, len(x), self.batch_size):
                b = perm[i:i + self.batch_size]
                loss = F.cross_entropy(self.linear_(x[b]), target[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "linear_")
        X = check_array(X, dtype=np.float32)
        with torch.no_grad():
            return self.linear_(self.scaler_(torch.from_numpy(X))).numpy()

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class LinearProbeSegmenter(BaseEstimator):
    """Per-position linear layer on fixed feature maps, upsampled bilinearly to the mask size.

    ``X`` is ``(N, C, h, w)``; ``y`` holds integer masks ``(N, H, W)``.
    """

    def __init__(self, num_classes=4, lr=0.1, epochs=30, batch_size=128, momentum=0.9,
                 weight_decay=0.0, seed=0):
        self.num_classes = num_classes
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    @staticmethod
    def _check_maps(X) -> torch.Tensor:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4:
            raise ValueError(f"expected feature maps (N, C, h, w), got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("feature maps contain non-finite values")
        return torch.from_numpy(X)

    def fit(self, X, y):
        x = self._check_maps(X)
        y = np.asarray(y)
        if y.ndim != 3 or len(y) != len(x):
            raise ValueError(f"masks must be (N, H, W) matching {len(x)} maps, got {y.shape}")
        if y.max() >= self.num_classes:
            raise ValueError(f"mask class {int(y.max())} >= num_classes {self.num_classes}")
        self.mask_size_ = y.shape[1:]
        self.scaler_ = _Standardize(x, (0, 2, 3))
        x = self.scaler_(x)
        target = torch.from_numpy(y.astype(np.int64))
        gen = torch.Generator().manual_seed(self.seed)
        self.conv_ = torch.nn.Conv2d(x.shape[1], self.num_classes, 1)
        torch.nn.init.zeros_(self.conv_.weight)
        torch.nn.init.zeros_(self.conv_.bias)
        opt = torch.optim.SGD(self.conv_.parameters(), lr=self.lr, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        steps = self.epochs * max(1, -(-len(x) // self.batch_size))
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        for _ in range(self.epochs):
            perm = torch.randperm(len(x), generator=gen)
            for i in range(0, len(x), self.batch_size):
                b = perm[i:i + self.batch_size]
                logits = upsample(self.conv_(x[b]), self.mask_size_)
                loss = F.cross_entropy(logits, target[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
        return self

    def predict(self, X, batch_size: int = 256):
        check_is_fitted(self, "conv_")
        x = self.scaler_(self._check_maps(X))
        out = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(upsample(self.conv_(x[i:i + batch_size]), self.mask_size_).argmax(1).numpy())
        return np.concatenate(out).astype(np.int64)

    def score(self, X, y):
        return miou(self.predict(X), y, self.num_classes)


# -- frozen feature extraction --------------------------------------------------

@torch.no_grad()
def extract_features(model: VICRegLNet, images: np.ndarray, multi_stage: bool = False,
                     batch_size: int = 256):
    """Frozen encoder outputs: ``(pooled (N, C), maps (N, C', h, w))``.

    With ``multi_stage`` the maps of all stages are upsampled to the finest
    stage resolution and concatenated along channels.
    """
    was_training = model.training
    model.eval()
    pooled, maps = [], []
    try:
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.asarray(images[i:i + batch_size], dtype=np.float32))
            stages = model.encoder.forward_stages(x)
            pooled.append(stages[-1].mean(dim=(-2, -1)))
            if multi_stage:
                size = stages[0].shape[-2:]
                maps.append(torch.cat([upsample(s, size) if s.shape[-2:] != size else s
                                       for s in stages], dim=1))
            else:
                maps.append(stages[-1])
    finally:
        model.train(was_training)
    return torch.cat(pooled).numpy(), torch.cat(maps).numpy()


def _sweep(make, fit_args, eval_args, lrs):
    scores = {}
    best = None
    for lr in lrs:
        est = make(lr).fit(*fit_args)
        scores[lr] = float(est.score(*eval_args))
        if best is None or scores[lr] > scores[best[0]]:
            best = (lr, est)
    return best, scores


def linear_probe_classify(model: VICRegLNet, dataset: ShapesDataset, cfg: ProbeConfig = None,
                          test: Optional[ShapesDataset] = None) -> ProbeResult:
    """Top-1 accuracy of a linear classifier on frozen pooled representations.

    Without ``test`` the last ``cfg.holdout`` fraction of ``dataset`` is held out.
    """
    cfg = cfg or ProbeConfig()
    if dataset.labels is None:
        raise ValueError("classification probe needs labels")
    train, held = (dataset, test) if test is not None else dataset.split(cfg.holdout)
    if test is not None and test.num_classes and train.num_classes and test.num_classes != train.num_classes:
        raise ValueError(f"class count mismatch: {train.num_classes} vs {test.num_classes}")
    before = parameter_checksum(model)
    f_train, _ = extract_features(model, train.images)
    f_test, _ = extract_features(model, held.images)
    make = lambda lr: LinearProbeClassifier(lr, cfg.epochs, cfg.batch_size, cfg.momentum,
                                            cfg.weight_decay, cfg.seed)
    (best_lr, est), scores = _sweep(make, (f_train, train.labels), (f_test, held.labels), cfg.lrs)
    if parameter_checksum(model) != before:
        raise RuntimeError("backbone parameters changed during probing")
    pred = est.predict(f_test)
    per_class = {int(c): float(np.mean(pred[held.labels == c] == c)) for c in np.unique(held.labels)}
    return ProbeResult("top1_accuracy", scores[best_lr], per_class,
                       {"best_lr": best_lr, "sweep": {str(k): v for k, v in scores.items()},
                        "backbone_checksum": before, "frozen": True,
                        "epochs": cfg.epochs, "n_train": len(train), "n_test": len(held)})


def linear_probe_segment(model: VICRegLNet, dataset: ShapesDataset, cfg: ProbeConfig = None,
                         test: Optional[ShapesDataset] = None) -> ProbeResult:
    """mIoU of a per-position linear head on frozen feature maps, upsampled bilinearly."""
    cfg = cfg or ProbeConfig()
    if dataset.masks is None:
        raise ValueError("segmentation probe needs masks")
    train, held = (dataset, test) if test is not None else dataset.split(cfg.holdout)
    num_classes = max(train.num_classes, held.num_classes,
                      int(max(train.masks.max(), held.masks.max())) + 1)
    before = parameter_checksum(model)
    _, m_train = extract_features(model, train.images, cfg.multi_stage)
    _, m_test = extract_features(model, held.images, cfg.multi_stage)
    make = lambda lr: LinearProbeSegmenter(num_classes, lr, cfg.epochs, cfg.batch_size,
                                           cfg.momentum, cfg.weight_decay, cfg.seed)
    (best_lr, est), scores = _sweep(make, (m_train, train.masks), (m_test, held.masks), cfg.lrs)
    if parameter_checksum(model) != before:
        raise RuntimeError("backbone parameters changed during probing")
    ious = per_class_iou(confusion_matrix(est.predict(m_test), held.masks, num_classes))
    return ProbeResult("miou", scores[best_lr], ious,
                       {"best_lr": best_lr, "sweep": {str(k): v for k, v in scores.items()},
                        "backbone_checksum": before, "frozen": True, "multi_stage": cfg.multi_stage,
                        "epochs": cfg.epochs, "n_train": len(train), "n_test": len(held)})
