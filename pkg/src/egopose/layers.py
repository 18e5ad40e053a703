"""Seeded parameter initialization and small building blocks."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def uniform_fan_in_(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        noise = torch.rand(tensor.shape, generator=gen, dtype=torch.float64)
        tensor.copy_((2.0 * noise - 1.0) * bound)
    return tensor


def init_default_(module: nn.Module, gen: torch.Generator) -> None:
    """Uniform fan-in init for every Linear/Conv2d; LayerNorm to identity.

    Modules are visited in registration order, so the result depends only
    on the generator state and the architecture.
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            uniform_fan_in_(m.weight, fan_in, gen)
            if m.bias is not None:
                uniform_fan_in_(m.bias, fan_in, gen)
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def zero_(layer: nn.Linear) -> None:
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            layer.bias.zero_()


_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU}


class MLP(nn.Sequential):
    """``Linear -> act -> ... -> Linear`` with ``len(dims) - 1`` layers."""

    def __init__(self, dims, activation: str = "gelu"):
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            if i:
                layers.append(_ACTIVATIONS[activation]())
            layers.append(nn.Linear(a, b))
        super().__init__(*layers)

    @property
    def last(self) -> nn.Linear:
        return self[-1]


def bilinear_sample(feature_map: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``(B, C, H, W)`` maps at normalized ``(B, ..., 2)`` points.

    Points are ``(x, y)`` in ``[0, 1]``: 0 is the left/top edge of the map
    and 1 the right/bottom edge, so cell ``i`` is centered at
    ``(i + 0.5) / W``.  Locations outside the map read zeros.
    Returns ``(B, ..., C)``.
    """
    b, c = feature_map.shape[:2]
    lead = points.shape[1:-1]
    grid = (2.0 * points - 1.0).reshape(b, 1, -1, 2)
    out = F.grid_sample(feature_map, grid, mode="bilinear", padding_mode="zeros",
                        align_corners=False)                      # (B, C, 1, P)
    return out[:, :, 0].transpose(1, 2).reshape(b, *lead, c)
