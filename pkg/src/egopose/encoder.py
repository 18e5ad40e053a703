"""Per-view convolutional feature extractor with a detachable heatmap head.

Views are folded into the batch dimension, so every view goes through the
same weights and no information crosses between views.  Feature maps are
kept channels-first internally, ``(B, V, C, H, W)``; the functional
helpers below take and return the channels-last ``(V, H, W, C)`` layout.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .errors import ContractError, ShapeMismatchError
from .layers import init_default_

__all__ = ["Encoder", "extract_features", "predict_heatmaps", "strip_heatmap_head"]


class Encoder(nn.Module):
    """Four 3x3 conv blocks, strides 1-2-1-2, GELU after each.

    With ``coord_channels`` the normalized pixel coordinates are stacked
    onto the RGB input.  A stack this shallow is otherwise nearly
    translation invariant, and the pooled proposal features would carry no
    information about where a joint appears in the image.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.encoder_channels
        c = cfg.feature_channels
        self.image_size = cfg.image_size
        self.coord_channels = cfg.coord_channels
        if cfg.coord_channels:
            w, h = cfg.image_size
            xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 - 1
            ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 - 1
            grid = torch.stack([xs[None, :].expand(h, w), ys[:, None].expand(h, w)])
            self.register_buffer("coords", grid, persistent=False)
        self.convs = nn.ModuleList([
            nn.Conv2d(5 if cfg.coord_channels else 3, c1, 3, stride=1, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, c3, 3, stride=1, padding=1),
            nn.Conv2d(c3, c, 3, stride=2, padding=1),
        ])
        if cfg.heatmap_head:
            self.heatmap_head = nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1), nn.GELU(), nn.Conv2d(c, cfg.num_joints, 1))
        else:
            self.heatmap_head = None

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_default_(self, gen)

    @property
    def has_head(self) -> bool:
        return self.heatmap_head is not None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, V, H, W, 3)`` images -> ``(B, V, C, H/4, W/4)`` features."""
        if images.ndim != 5 or images.shape[-1] != 3:
            raise ShapeMismatchError(f"expected (B, V, H, W, 3) images, got {tuple(images.shape)}")
        b, v, h, w, _ = images.shape
        if (w, h) != tuple(self.image_size):
            raise ShapeMismatchError(
                f"image size {(w, h)} does not match encoder image size {tuple(self.image_size)}")
        x = images.reshape(b * v, h, w, 3).permute(0, 3, 1, 2)
        if self.coord_channels:
            x = torch.cat([x, self.coords.to(x.dtype).expand(b * v, 2, h, w)], dim=1)
        for conv in self.convs:
            x = F.gelu(conv(x))
        return x.reshape(b, v, *x.shape[1:])

    def heatmaps(self, features: torch.Tensor) -> torch.Tensor:
        """``(B, V, C, h, w)`` -> ``(B, V, N_j, h, w)``."""
        if self.heatmap_head is None:
            raise ContractError("heatmap head has been stripped from this encoder")
        b, v = features.shape[:2]
        out = self.heatmap_head(features.reshape(b * v, *features.shape[2:]))
        return out.reshape(b, v, *out.shape[1:])


def _as_tensor(x, module: nn.Module) -> torch.Tensor:
    dtype = next(module.parameters()).dtype
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(dtype)


def extract_features(encoder: Encoder, images) -> torch.Tensor:
    """``(V, H, W, 3)`` images -> ``(V, H/4, W/4, C)`` feature maps."""
    x = _as_tensor(images, encoder)
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected (V, H, W, 3) images, got {tuple(x.shape)}")
    return encoder(x[None])[0].permute(0, 2, 3, 1)


def predict_heatmaps(encoder: Encoder, features) -> torch.Tensor:
    """``(V, h, w, C)`` features -> ``(V, N_j, h, w)`` heatmaps."""
    f = _as_tensor(features, encoder)
    return encoder.heatmaps(f.permute(0, 3, 1, 2)[None])[0]


def strip_heatmap_head(encoder: Encoder) -> Encoder:
    """Copy of ``encoder`` without its pre-training head."""
    if not encoder.has_head:
        raise ContractError("encoder has no heatmap head to strip")
    stripped = copy.deepcopy(encoder)
    stripped.heatmap_head = None
    return stripped
