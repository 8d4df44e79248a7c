"""Desk-scale convolutional encoder, local projector, global expander and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn


@dataclass
class EncoderConfig:
    """ResNet-style stack: strided stem conv followed by residual stages.

    The output stride is ``stem_stride * prod(stage_strides)``.
    """

    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    stage_channels: List[int] = field(default_factory=lambda: [32, 64])
    stage_strides: List[int] = field(default_factory=lambda: [2, 2])
    blocks_per_stage: int = 1
    norm: str = "batch"
    activation: str = "relu"
    input_size: int = 64

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("stage_channels and stage_strides must have the same length")

    @property
    def output_stride(self) -> int:
        return self.stem_stride * math.prod(self.stage_strides)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1] if self.stage_channels else self.stem_channels

    def map_size(self, resolution: int) -> int:
        return resolution // self.output_stride


@dataclass
class HeadConfig:
    projector_dims: List[int] = field(default_factory=lambda: [64, 64, 64, 64])
    expander_dims: List[int] = field(default_factory=lambda: [64, 512, 512, 512])
    projector_norm: bool = True
    expander_norm: bool = True


def _norm2d(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind {kind!r}")


def _activation(kind: str) -> nn.Module:
    acts = {"relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}
    if kind not in acts:
        raise ValueError(f"unknown activation {kind!r}")
    return acts[kind]()


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, norm: str, act: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False), _norm2d(norm, c_out), _activation(act),
            nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False), _norm2d(norm, c_out),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                                          _norm2d(norm, c_out))
        self.act = _activation(act)

    def forward(self, x):
        return self.act(self.body(x) + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride, 1, bias=False),
            _norm2d(cfg.norm, cfg.stem_channels), _activation(cfg.activation))
        stages = []
        c_in = cfg.stem_channels
        for c_out, stride in zip(cfg.stage_channels, cfg.stage_strides):
            blocks = [ResidualBlock(c_in, c_out, stride, cfg.norm, cfg.activation)]
            blocks += [ResidualBlock(c_out, c_out, 1, cfg.norm, cfg.activation)
                       for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def check_input(self, x: torch.Tensor) -> None:
        s = self.cfg.output_stride
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % s or w % s:
            raise ValueError(f"input resolution {h}x{w} is not divisible by output stride {s}")

    def forward_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        self.check_input(x)
        x = self.stem(x)
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps or [x]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_stages(x)[-1]


class LocalProjector(nn.Module):
    """The same MLP applied at every spatial position, as 1x1 convolutions."""

    def __init__(self, dims: Sequence[int], norm: bool = True):
        super().__init__()
        self.dims = list(dims)
        layers: List[nn.Module] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            layers.append(nn.Conv2d(d_in, d_out, 1, bias=last or not norm))
            if not last:
                if norm:
                    layers.append(nn.BatchNorm2d(d_out))
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[1] != self.dims[0]:
            raise ValueError(f"local projector expects {self.dims[0]} channels, got {y.shape[1]}")
        return self.net(y)


class GlobalExpander(nn.Module):
    """MLP with normalization and activation between layers, none after the last."""

    def __init__(self, dims: Sequence[int], norm: bool = True):
        super().__init__()
        self.dims = list(dims)
        layers: List[nn.Module] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            layers.append(nn.Linear(d_in, d_out, bias=last or not norm))
            if not last:
                if norm:
                    layers.append(nn.BatchNorm1d(d_out))
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.dims[0]:
            raise ValueError(f"global expander expects dimension {self.dims[0]}, got {v.shape[-1]}")
        return self.net(v)


def pool(y: torch.Tensor) -> torch.Tensor:
    """Channelwise mean over the spatial dimensions."""
    return y.mean(dim=(-2, -1))


class VICRegLNet(nn.Module):
    """Encoder plus local projector and global expander."""

    def __init__(self, encoder: EncoderConfig = None, heads: HeadConfig = None):
        super().__init__()
        self.encoder_cfg = encoder or EncoderConfig()
        self.head_cfg = heads or HeadConfig()
        c = self.encoder_cfg.out_channels
        if self.head_cfg.projector_dims[0] != c or self.head_cfg.expander_dims[0] != c:
            raise ValueError(f"head input dims must equal encoder channels {c}: {self.head_cfg}")
        self.encoder = Encoder(self.encoder_cfg)
        self.projector = LocalProjector(self.head_cfg.projector_dims, self.head_cfg.projector_norm)
        self.expander = GlobalExpander(self.head_cfg.expander_dims, self.head_cfg.expander_norm)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def local_project(self, y: torch.Tensor) -> torch.Tensor:
        return self.projector(y)

    def global_expand(self, v: torch.Tensor) -> torch.Tensor:
        return self.expander(v)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns ``(feature map, projected map, global embedding)``."""
        y = self.encode(x)
        return y, self.local_project(y), self.global_expand(pool(y))


def init_weights(module: nn.Module, seed: int) -> None:
    """Fan-in scaled initialization drawn from a dedicated generator."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(encoder: EncoderConfig = None, heads: HeadConfig = None, seed: int = 0) -> VICRegLNet:
    model = VICRegLNet(encoder, heads)
    init_weights(model, seed)
    return model


# -- checkpoints ------------------------------------------------------------

MAGIC = b"VRGL"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.int32, 4: np.uint8, 5: np.bool_}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Named arrays plus bookkeeping.

    Model parameters live under ``model/``, optimizer buffers under
    ``optim/``; ``step`` is the number of completed optimizer steps.
    """

    tensors: Dict[str, np.ndarray]
    step: int = 0
    config_hash: bytes = b"\0" * 32
    version: int = VERSION

    @classmethod
    def from_state(cls, model: nn.Module, optim_state: Optional[Dict[str, np.ndarray]] = None,
                   step: int = 0, config_hash: bytes = b"\0" * 32) -> "Checkpoint":
        tensors = {f"model/{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        for k, v in (optim_state or {}).items():
            tensors[f"optim/{k}"] = np.asarray(v)
        tensors["meta/step"] = np.array([step], dtype=np.int64)
        return cls(tensors, step, config_hash)

    def model_state(self) -> Dict[str, torch.Tensor]:
        return {k[len("model/"):]: torch.from_numpy(v.copy())
                for k, v in self.tensors.items() if k.startswith("model/")}

    def optim_state(self) -> Dict[str, np.ndarray]:
        return {k[len("optim/"):]: v for k, v in self.tensors.items() if k.startswith("optim/")}

    def load_into(self, model: nn.Module) -> None:
        model.load_state_dict(self.model_state())


def config_hash(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    """Write the little-endian ``VRGL`` container.

    Layout: magic, u32 version, u32 tensor count, then per tensor u32 name
    length, UTF-8 name, u8 dtype tag, u32 rank, u64 dims, raw data; finally
    the 32-byte config hash.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    if len(ckpt.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    buf.write(ckpt.config_hash)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} at byte {pos - 5}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = np.dtype(_DTYPES[tag]).newbyteorder("<")
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    ckpt_hash = take(32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    step = int(tensors["meta/step"][0]) if "meta/step" in tensors else 0
    return Checkpoint(tensors, step, ckpt_hash, version)


def model_from_config(config: dict) -> VICRegLNet:
    return VICRegLNet(EncoderConfig(**config["encoder"]), HeadConfig(**config["heads"]))


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
