"""scikit-learn style front end for VICRegL pretraining."""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import TrainConfig
from .data import ShapesDataset
from .eval import extract_features
from .trainer import Trainer


def check_images(X) -> np.ndarray:
    """Validate a ``(N, 3, H, W)`` float image batch with values in [0, 1]."""
    if isinstance(X, ShapesDataset):
        X = X.images
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class VICRegL(TransformerMixin, BaseEstimator):
    """Self-supervised pretraining of a small convolutional encoder.

    ``fit`` trains on unlabeled images ``(N, 3, H, W)``; ``transform`` returns
    the frozen pooled representations and ``transform_maps`` the feature maps.
    Parameters not exposed here are taken from ``config`` (a ``TrainConfig``).
    """

    def __init__(self, alpha=0.75, gamma_large=20, gamma_small=4, lambda_inv=25.0, mu_var=25.0,
                 nu_cov=1.0, multicrop=False, n_small=6, epochs=15, batch_size=64, base_lr=None,
                 optimizer=None, seed=0, config: Optional[TrainConfig] = None, out_dir=None):
        self.alpha = alpha
        self.gamma_large = gamma_large
        self.gamma_small = gamma_small
        self.lambda_inv = lambda_inv
        self.mu_var = mu_var
        self.nu_cov = nu_cov
        self.multicrop = multicrop
        self.n_small = n_small
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.optimizer = optimizer
        self.seed = seed
        self.config = config
        self.out_dir = out_dir

    def build_config(self) -> TrainConfig:
        cfg = copy.deepcopy(self.config) if self.config is not None else TrainConfig()
        cfg.loss.alpha = self.alpha
        cfg.loss.gamma_large = self.gamma_large
        cfg.loss.gamma_small = self.gamma_small
        cfg.loss.lambda_inv = self.lambda_inv
        cfg.loss.mu_var = self.mu_var
        cfg.loss.nu_cov = self.nu_cov
        cfg.multicrop.enabled = self.multicrop
        cfg.multicrop.n_small = self.n_small
        cfg.epochs = self.epochs
        cfg.batch_size = self.batch_size
        if self.base_lr is not None:
            cfg.optim.base_lr = self.base_lr
        if self.optimizer is not None:
            cfg.optim.kind = self.optimizer
        cfg.seed = self.seed
        cfg.multicrop.large_size = cfg.data.canvas_size = cfg.encoder.input_size
        return cfg.validate()

    def fit(self, X, y=None):
        images = check_images(X)
        cfg = self.build_config()
        if images.shape[-1] != cfg.encoder.input_size or images.shape[-2] != cfg.encoder.input_size:
            cfg.encoder.input_size = images.shape[-1]
            cfg.multicrop.large_size = images.shape[-1]
            cfg.validate()
        trainer = Trainer(cfg, ShapesDataset(images), self.out_dir)
        trainer.resume()
        self.checkpoint_ = trainer.fit()
        self.model_ = trainer.model.eval()
        self.history_ = trainer.history
        self.config_ = cfg
        self.n_features_out_ = cfg.encoder.out_channels
        return self

    def transform(self, X) -> np.ndarray:
        """Pooled frozen representations ``(N, C)``."""
        check_is_fitted(self, "model_")
        pooled, _ = extract_features(self.model_, check_images(X))
        return pooled

    def transform_maps(self, X, multi_stage: bool = False) -> np.ndarray:
        """Frozen feature maps ``(N, C, h, w)``."""
        check_is_fitted(self, "model_")
        _, maps = extract_features(self.model_, check_images(X), multi_stage)
        return maps

    def embed(self, X) -> np.ndarray:
        """Global expander outputs ``(N, D)`` in eval mode."""
        check_is_fitted(self, "model_")
        x = torch.from_numpy(check_images(X))
        with torch.no_grad():
            return self.model_.eval()(x)[2].numpy()
