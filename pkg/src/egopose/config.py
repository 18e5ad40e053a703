"""Model and training hyperparameters."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch

from .errors import InvalidInputError

__all__ = ["ModelConfig", "TrainConfig", "dtype_of"]


@dataclass(frozen=True)
class ModelConfig:
    num_joints: int = 16
    views: int = 2
    image_size: tuple[int, int] = (64, 64)      # (width, height)
    encoder_channels: tuple[int, int, int] = (16, 32, 32)
    coord_channels: bool = True                 # append pixel (x, y) to the input image
    feature_channels: int = 64                  # C
    ppn_hidden: int = 256
    ppn_layers: int = 2
    ppn_activation: str = "gelu"
    token_dim: int = 256                        # C'
    num_layers: int = 3                         # S
    num_heads: int = 8                          # M
    num_points: int = 4                         # K
    ffn_mult: int = 4
    norm_placement: str = "pre"
    workspace_scale: float = 1000.0
    output_scale: float = 1000.0                # mm per unit of PPN output
    offset_scale: float = 100.0                 # mm per unit of offset-head output
    heatmap_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        object.__setattr__(self, "encoder_channels", tuple(int(x) for x in self.encoder_channels))
        if self.num_layers < 0:
            raise InvalidInputError("num_layers must be >= 0")
        if self.views < 1:
            raise InvalidInputError("views must be >= 1")
        if self.token_dim % self.num_heads:
            raise InvalidInputError("token_dim must be divisible by num_heads")
        if any(s % 4 for s in self.image_size):
            raise InvalidInputError(f"image size {self.image_size} must be divisible by 4")
        if self.norm_placement not in ("pre", "post"):
            raise InvalidInputError("norm_placement must be 'pre' or 'post'")
        if self.ppn_activation not in ("gelu", "relu"):
            raise InvalidInputError("ppn_activation must be 'gelu' or 'relu'")
        if not (self.workspace_scale > 0 and self.output_scale > 0 and self.offset_scale > 0):
            raise InvalidInputError("workspace_scale, output_scale and offset_scale must be positive")
        if self.ppn_layers < 2:
            raise InvalidInputError("ppn_layers must be >= 2")

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.image_size[0] // 4, self.image_size[1] // 4

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 12
    base_lr: float = 1e-3
    weight_decay: float = 5e-3
    grad_clip_norm: float = 5.0
    decay_epochs: tuple[int, ...] = (8, 11)
    decay_factor: float = 0.1
    optimizer: str = "adamw"
    seed: int = 0
    precision: str = "64-bit"
    loss_reduction: str = "mean"          # batch reduction of the stage loss
    val_fraction: float = 0.1
    heatmap_sigma: float = 2.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        for name in ("batch_size", "epochs", "base_lr", "grad_clip_norm", "decay_factor"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be non-negative")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise InvalidInputError("decay_epochs must be strictly increasing")
        if d and d[-1] >= self.epochs:
            raise InvalidInputError("decay_epochs must all be < epochs")
        if self.optimizer not in ("adamw", "adam"):
            raise InvalidInputError("optimizer must be 'adamw' or 'adam'")
        if self.precision not in ("64-bit", "32-bit"):
            raise InvalidInputError("precision must be '64-bit' or '32-bit'")
        if self.loss_reduction not in ("mean", "sum"):
            raise InvalidInputError("loss_reduction must be 'mean' or 'sum'")

    @property
    def dtype(self) -> torch.dtype:
        return dtype_of(self.precision)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


def dtype_of(precision: str) -> torch.dtype:
    return torch.float64 if precision == "64-bit" else torch.float32
