"""Pose refinement transformer.

Each joint gets a query token built from its index and its proposed 3D
location.  Every layer lets the tokens read image features around the
joint's projection in each view (deformable stereo attention), mix with
each other (self-attention) and pass through an FFN; a per-layer head then
predicts an offset that is added to the proposal.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .camera import FisheyeCamera
from .config import ModelConfig
from .errors import ShapeMismatchError
from .layers import MLP, bilinear_sample, init_default_, uniform_fan_in_, zero_

__all__ = [
    "CameraTensors",
    "project_torch",
    "JointQueryEmbedding",
    "DeformableViewAttention",
    "DeformableStereoAttention",
    "SelfAttention",
    "PRFormerLayer",
    "PRFormer",
]


class CameraTensors(nn.Module):
    """A camera rig packed into buffers for batched differentiable projection."""

    def __init__(self, cameras: Sequence[FisheyeCamera]):
        super().__init__()
        cams = list(cameras)
        self.cameras = cams
        f64 = torch.float64
        self.register_buffer("rotation", torch.tensor(np.array([c.rotation for c in cams]), dtype=f64),
                             persistent=False)
        self.register_buffer("translation", torch.tensor(np.array([c.translation for c in cams]), dtype=f64),
                             persistent=False)
        self.register_buffer("intrinsics", torch.tensor(
            [[c.focal, c.principal_point[0], c.principal_point[1],
              c.image_size[0], c.image_size[1], c.theta_max] for c in cams], dtype=f64),
            persistent=False)

    def __len__(self) -> int:
        return len(self.cameras)


def project_torch(cams: CameraTensors, points: torch.Tensor):
    """Project ``(B, N, 3)`` points into every view.

    Returns normalized coordinates ``(B, N, V, 2)`` (``u / width``,
    ``v / height``) and a visibility mask ``(B, N, V)``.  Differentiable in
    ``points`` except across the visibility boundary.
    """
    dt = points.dtype
    p = torch.einsum("vij,bnj->bnvi", cams.rotation.to(dt), points) + cams.translation.to(dt)
    px, py, pz = p.unbind(-1)
    rho = torch.sqrt(px * px + py * py + 1e-24)
    theta = torch.atan2(rho, pz)
    focal, cx, cy, width, height, theta_max = cams.intrinsics.to(dt).unbind(-1)
    r = focal * theta
    u = cx + r * px / rho
    v = cy + r * py / rho
    with torch.no_grad():
        at_center = (px == 0) & (py == 0) & (pz == 0)
        visible = (theta <= theta_max) & (u >= 0) & (u < width) & (v >= 0) & (v < height) \
            & ~at_center
    return torch.stack([u / width, v / height], dim=-1), visible


class JointQueryEmbedding(nn.Module):
    """Token for joint ``j`` from ``(j / N_j, P0_j / scale)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mlp = MLP([4, cfg.token_dim, cfg.token_dim])
        self.num_joints = cfg.num_joints
        self.scale = cfg.workspace_scale

    def forward(self, proposal: torch.Tensor) -> torch.Tensor:
        b, n, _ = proposal.shape
        ident = torch.arange(n, dtype=proposal.dtype, device=proposal.device) / self.num_joints
        x = torch.cat([ident.expand(b, n)[..., None], proposal / self.scale], dim=-1)
        return self.mlp(x)


class DeformableViewAttention(nn.Module):
    """Single-scale deformable attention over one view's feature map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.token_dim
        self.heads, self.points = cfg.num_heads, cfg.num_points
        self.head_dim = d // cfg.num_heads
        self.sampling_offsets = nn.Linear(d, self.heads * self.points * 2)
        self.attention_weights = nn.Linear(d, self.heads * self.points)
        # per-head value projection C -> C'/M
        self.value_weight = nn.Parameter(torch.empty(self.heads, cfg.feature_channels, self.head_dim))
        self.value_bias = nn.Parameter(torch.empty(self.heads, self.head_dim))
        self.output_proj = nn.Linear(d, d)
        self.feature_channels = cfg.feature_channels

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_default_(self, gen)
        uniform_fan_in_(self.value_weight, self.feature_channels, gen)
        uniform_fan_in_(self.value_bias, self.feature_channels, gen)
        # all points start at the reference with uniform weights
        zero_(self.sampling_offsets)
        zero_(self.attention_weights)

    def sampling_locations(self, query: torch.Tensor, ref: torch.Tensor, map_size) -> torch.Tensor:
        """Normalized ``(B, N, M, K, 2)`` sampling points.

        The offset projection speaks in feature cells; dividing by the map
        size ``(h, w)`` turns that into normalized units.
        """
        b, n, _ = query.shape
        h, w = map_size
        offsets = self.sampling_offsets(query).reshape(b, n, self.heads, self.points, 2)
        cells = torch.tensor([w, h], dtype=query.dtype, device=query.device)
        return ref[:, :, None, None, :] + offsets / cells

    def forward(self, query: torch.Tensor, ref: torch.Tensor, feature_map: torch.Tensor,
                return_details: bool = False):
        """``query (B, N, C')``, ``ref (B, N, 2)``, ``feature_map (B, C, h, w)``."""
        b, n, _ = query.shape
        m, k = self.heads, self.points
        weights = F.softmax(self.attention_weights(query).reshape(b, n, m, k), dim=-1)
        locs = self.sampling_locations(query, ref, feature_map.shape[-2:])
        samples = bilinear_sample(feature_map, locs)                         # (B, N, M, K, C)
        values = torch.einsum("bnmkc,mcd->bnmkd", samples, self.value_weight) \
            + self.value_bias[:, None, :]
        heads = (weights[..., None] * values).sum(dim=3)                    # (B, N, M, C'/M)
        out = self.output_proj(heads.reshape(b, n, m * self.head_dim))
        if return_details:
            return out, {"locations": locs, "weights": weights}
        return out


class DeformableStereoAttention(nn.Module):
    """Per-view deformable attention at the projected proposal, zero-filled
    for views that do not see the joint, fused by a linear map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.views = cfg.views
        self.view_attn = DeformableViewAttention(cfg)
        self.fuse = nn.Linear(cfg.views * cfg.token_dim, cfg.token_dim)

    def reset_parameters(self, gen: torch.Generator) -> None:
        self.view_attn.reset_parameters(gen)
        init_default_(self.fuse, gen)

    def forward(self, query, proposal, cams: CameraTensors, features, return_slots=False):
        """``features (B, V, C, h, w)``; returns ``(B, N, C')``."""
        v = features.shape[1]
        if v != len(cams) or v != self.views:
            raise ShapeMismatchError(
                f"got {v} feature maps, {len(cams)} cameras, model expects {self.views} views")
        refs, visible = project_torch(cams, proposal)
        slots = []
        for k in range(v):
            vis = visible[:, :, k]
            ref = torch.where(vis[..., None], refs[:, :, k], torch.full_like(refs[:, :, k], 0.5))
            z = self.view_attn(query, ref, features[:, k])
            slots.append(torch.where(vis[..., None], z, torch.zeros_like(z)))
        concat = torch.cat(slots, dim=-1)
        out = self.fuse(concat)
        if return_slots:
            return out, concat
        return out


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.token_dim
        self.heads = cfg.num_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.output_proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor):
        """Returns the mixed tokens and the ``(B, M, N, N)`` attention weights."""
        b, n, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = F.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.output_proj(out), attn


class PRFormerLayer(nn.Module):
    """Cross-attention (deformable stereo) -> self-attention -> FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.token_dim
        self.pre_norm = cfg.norm_placement == "pre"
        self.cross = DeformableStereoAttention(cfg)
        self.self_attn = SelfAttention(cfg)
        self.ffn = MLP([d, cfg.ffn_mult * d, d])
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def reset_parameters(self, gen: torch.Generator) -> None:
        self.cross.reset_parameters(gen)
        init_default_(self.self_attn, gen)
        init_default_(self.ffn, gen)
        for norm in (self.norm1, self.norm2, self.norm3):
            init_default_(norm, gen)

    def forward(self, tokens, proposal, cams, features):
        if self.pre_norm:
            tokens = tokens + self.cross(self.norm1(tokens), proposal, cams, features)
            sa, attn = self.self_attn(self.norm2(tokens))
            tokens = tokens + sa
            tokens = tokens + self.ffn(self.norm3(tokens))
        else:
            tokens = self.norm1(tokens + self.cross(tokens, proposal, cams, features))
            sa, attn = self.self_attn(tokens)
            tokens = self.norm2(tokens + sa)
            tokens = self.norm3(tokens + self.ffn(tokens))
        return tokens, attn


class OffsetHead(nn.Module):
    """LayerNorm then a 2-layer MLP to a 3D offset in units of
    ``offset_scale`` mm; last layer starts at zero."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.offset_scale = cfg.offset_scale
        self.norm = nn.LayerNorm(cfg.token_dim)
        self.mlp = MLP([cfg.token_dim, cfg.token_dim, 3])

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_default_(self, gen)
        zero_(self.mlp.last)

    def forward(self, tokens):
        return self.mlp(self.norm(tokens)) * self.offset_scale


class PRFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.jqt = JointQueryEmbedding(cfg)
        self.layers = nn.ModuleList([PRFormerLayer(cfg) for _ in range(cfg.num_layers)])
        self.offset_heads = nn.ModuleList([OffsetHead(cfg) for _ in range(cfg.num_layers)])

    def reset_parameters(self, gen: torch.Generator) -> None:
        init_default_(self.jqt, gen)
        for layer, head in zip(self.layers, self.offset_heads):
            layer.reset_parameters(gen)
            head.reset_parameters(gen)

    def forward(self, proposal, cams, features):
        """Returns stage poses ``[P1, ..., PS]`` and per-layer attention maps."""
        tokens = self.jqt(proposal)
        stages, attns = [], []
        for layer, head in zip(self.layers, self.offset_heads):
            tokens, attn = layer(tokens, proposal, cams, features)
            stages.append(proposal + head(tokens))
            attns.append(attn)
        return stages, attns
