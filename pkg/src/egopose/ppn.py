"""Pose proposal network: pooled per-view features -> coarse 3D joints."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ShapeMismatchError
from .layers import MLP, init_default_

__all__ = ["PoseProposalNetwork", "global_average_pool", "pose_proposal"]


def global_average_pool(features: torch.Tensor) -> torch.Tensor:
    """Mean over the two trailing spatial axes.

    Values are sorted before summing so the result does not depend on the
    order of the cells, bit for bit.
    """
    flat = features.flatten(-2)
    return torch.sort(flat, dim=-1).values.sum(-1) / flat.shape[-1]


class PoseProposalNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig, rest_pose=None):
        super().__init__()
        self.views = cfg.views
        self.channels = cfg.feature_channels
        self.num_joints = cfg.num_joints
        self.output_scale = cfg.output_scale
        dims = [cfg.views * cfg.feature_channels] + [cfg.ppn_hidden] * (cfg.ppn_layers - 1) \
            + [3 * cfg.num_joints]
        self.mlp = MLP(dims, cfg.ppn_activation)
        if rest_pose is None:
            rest_pose = np.zeros((cfg.num_joints, 3))
        self.register_buffer("rest_pose", torch.as_tensor(np.asarray(rest_pose, dtype=np.float64)),
                             persistent=False)

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_default_(self, gen)
        with torch.no_grad():
            self.mlp.last.bias.copy_(self.rest_pose.reshape(-1) / self.output_scale)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """``(B, V, C, h, w)`` features -> ``(B, N_j, 3)`` proposal in mm.

        The MLP works in units of ``output_scale`` mm so that unit-sized
        parameter steps move the proposal by a useful distance.
        """
        b, v, c = features.shape[:3]
        if (v, c) != (self.views, self.channels):
            raise ShapeMismatchError(
                f"PPN expects {self.views} views x {self.channels} channels, got {v} x {c}")
        pooled = global_average_pool(features).reshape(b, v * c)
        return (self.mlp(pooled) * self.output_scale).reshape(b, self.num_joints, 3)


def pose_proposal(ppn: PoseProposalNetwork, features) -> torch.Tensor:
    """``(V, h, w, C)`` feature maps -> ``(N_j, 3)`` proposal."""
    f = torch.as_tensor(features).to(ppn.mlp.last.weight.dtype)
    if f.ndim != 4:
        raise ShapeMismatchError(f"expected (V, h, w, C) features, got {tuple(f.shape)}")
    return ppn(f.permute(0, 3, 1, 2)[None])[0]
