"""Run configuration: nested dataclasses addressable by dotted paths.

Configs are stored as YAML. ``apply_overrides`` sets fields such as
``loss.alpha`` or ``optim.base_lr`` from strings, which is how command-line
flags take precedence over file values.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from .geometry import AugmentConfig
from .model import EncoderConfig, HeadConfig


@dataclass
class LossConfig:
    alpha: float = 0.75
    gamma_large: int = 20
    gamma_small: int = 4
    lambda_inv: float = 25.0
    mu_var: float = 25.0
    nu_cov: float = 1.0
    use_location: bool = True
    use_feature: bool = True
    use_variance: bool = True
    use_covariance: bool = True
    normalize_feature_match: bool = False


@dataclass
class MultiCropConfig:
    enabled: bool = False
    n_large: int = 2
    n_small: int = 6
    large_size: int = 64
    small_size: int = 32
    area_range: Tuple[float, float] = (0.08, 1.0)
    small_area_range: Tuple[float, float] = (0.05, 0.3)
    aspect_range: Tuple[float, float] = (0.75, 4 / 3)
    flip_prob: float = 0.5


@dataclass
class OptimConfig:
    kind: str = "sgd"
    base_lr: float = 0.05
    final_lr: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 1e-6
    warmup_epochs: int = 2
    betas: Tuple[float, float] = (0.9, 0.999)
    # the multi-crop loss sums over view pairs; dividing the rate by the pair
    # count keeps the step size of the two-view setting
    scale_lr_by_pairs: bool = True


@dataclass
class DataConfig:
    path: Optional[str] = None
    # used when no path is given: shapes dataset generated in memory
    n_samples: int = 2048
    canvas_size: int = 64
    seed: int = 0


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    multicrop: MultiCropConfig = field(default_factory=MultiCropConfig)
    # grayscale would erase the color cue that separates shape classes
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(enabled=True, grayscale_prob=0.0))
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.loss.alpha <= 1.0:
            raise ValueError(f"loss.alpha must lie in [0, 1], got {self.loss.alpha}")
        if self.multicrop.n_large != 2:
            raise ValueError(f"multicrop.n_large must be 2, got {self.multicrop.n_large}")
        if self.optim.warmup_epochs > self.epochs and self.epochs > 0:
            raise ValueError("optim.warmup_epochs must not exceed epochs")
        if self.loss.gamma_large < 1 or self.loss.gamma_small < 1:
            raise ValueError("gammas must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optim.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optim.kind!r}")
        sizes = [self.multicrop.large_size]
        if self.multicrop.enabled and self.multicrop.n_small > 0:
            sizes.append(self.multicrop.small_size)
        for res in sizes:
            if res % self.encoder.output_stride or self.encoder.map_size(res) < 1:
                raise ValueError(f"resolution {res} incompatible with output stride "
                                 f"{self.encoder.output_stride}")
        c = self.encoder.out_channels
        if self.heads.projector_dims[0] != c or self.heads.expander_dims[0] != c:
            raise ValueError(f"head input dims must equal encoder channels ({c})")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        return _build(cls, d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: Mapping[str, Any]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint) and isinstance(value, Mapping):
            value = _build(hint, value)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def _coerce(text: str, current: Any, hint: Any) -> Any:
    if isinstance(current, bool) or hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    value = yaml.safe_load(text)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def apply_overrides(cfg: TrainConfig, overrides: Mapping[str, Any]) -> TrainConfig:
    """Set fields by dotted path, e.g. ``{"loss.alpha": "0.5"}``; string values are parsed."""
    for path, value in overrides.items():
        obj = cfg
        parts = path.split(".")
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise KeyError(f"unknown config key {path!r}")
            obj = getattr(obj, p)
        last = parts[-1]
        if not dataclasses.is_dataclass(obj) or last not in {f.name for f in dataclasses.fields(obj)}:
            raise KeyError(f"unknown config key {path!r}")
        current = getattr(obj, last)
        if isinstance(value, str):
            value = _coerce(value, current, typing.get_type_hints(type(obj)).get(last))
        setattr(obj, last, value)
    return cfg


def load_config(path: Union[str, Path, None] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        cfg = TrainConfig.from_dict(raw)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: TrainConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
