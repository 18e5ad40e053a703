"""The assembled two-stage estimator and its single-sample helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .camera import FisheyeCamera
from .config import ModelConfig
from .encoder import Encoder
from .errors import ContractError, InvalidInputError, ShapeMismatchError
from .ppn import PoseProposalNetwork
from .prformer import CameraTensors, PRFormer

__all__ = ["EgoPoseFormer", "ForwardResult", "build_model", "make_jqts",
           "deformable_attention_view", "deformable_stereo_attention", "prformer_layer",
           "forward_stages", "export_self_attention"]


@dataclass
class ForwardResult:
    stages: list[torch.Tensor]          # [P0, P1, ..., PS], each (B, N_j, 3)
    attention: list[torch.Tensor]       # per layer (B, M, N_j, N_j)
    features: torch.Tensor              # (B, V, C, h, w)

    @property
    def final(self) -> torch.Tensor:
        return self.stages[-1]


class EgoPoseFormer(nn.Module):
    """Encoder -> pose proposal -> refinement transformer."""

    def __init__(self, cfg: ModelConfig, cameras: Sequence[FisheyeCamera], rest_pose=None):
        super().__init__()
        if len(cameras) != cfg.views:
            raise InvalidInputError(f"config has {cfg.views} views but {len(cameras)} cameras given")
        for cam in cameras:
            if tuple(cam.image_size) != tuple(cfg.image_size):
                raise InvalidInputError(
                    f"camera image size {cam.image_size} != model image size {cfg.image_size}")
        self.cfg = cfg
        self.cams = CameraTensors(cameras)
        self.encoder = Encoder(cfg)
        self.ppn = PoseProposalNetwork(cfg, rest_pose)
        self.prformer = PRFormer(cfg)

    def reset_parameters(self, seed: int) -> "EgoPoseFormer":
        gen = torch.Generator().manual_seed(int(seed))
        self.encoder.reset_parameters(gen)
        self.ppn.reset_parameters(gen)
        self.prformer.reset_parameters(gen)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.ppn.mlp.last.weight.dtype

    @property
    def cameras(self) -> list[FisheyeCamera]:
        return self.cams.cameras

    def forward(self, images: torch.Tensor, proposal: torch.Tensor | None = None) -> ForwardResult:
        """``images (B, V, H, W, 3)``.

        ``proposal`` replaces the PPN output when given (used to study how
        refinement depends on proposal quality).
        """
        features = self.encoder(images)
        p0 = self.ppn(features) if proposal is None else proposal
        refined, attn = self.prformer(p0, self.cams, features)
        return ForwardResult([p0] + refined, attn, features)

    def block_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters()]


def build_model(cfg: ModelConfig, cameras, rest_pose=None, seed: int = 0,
                dtype: torch.dtype = torch.float64) -> EgoPoseFormer:
    model = EgoPoseFormer(cfg, cameras, rest_pose).to(dtype)
    return model.reset_parameters(seed)


# Single-sample helpers.  They accept unbatched arrays and mirror the
# batched modules one to one.


def _t(x, dtype):
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(dtype)


def make_jqts(model: EgoPoseFormer, proposal) -> torch.Tensor:
    """``(N_j, 3)`` proposal -> ``(N_j, C')`` joint query tokens."""
    p0 = _t(proposal, model.dtype)
    if not torch.isfinite(p0).all():
        raise InvalidInputError("proposal must be finite")
    return model.prformer.jqt(p0[None])[0]


def deformable_attention_view(attn_module, query, ref, feature_map) -> torch.Tensor:
    """One token against one ``(h, w, C)`` feature map; ``ref`` in ``[0, 1]^2``."""
    dtype = attn_module.output_proj.weight.dtype
    q = _t(query, dtype).reshape(1, 1, -1)
    r = _t(ref, dtype).reshape(1, 1, 2)
    if (r < 0).any() or (r > 1).any():
        raise ContractError(f"reference point {r.flatten().tolist()} outside [0, 1]^2")
    fm = _t(feature_map, dtype).permute(2, 0, 1)[None]
    return attn_module(q, r, fm)[0, 0]


def deformable_stereo_attention(model: EgoPoseFormer, layer: int, query, proposal_joint,
                                features, return_slots: bool = False):
    """Fused cross-view attention output for one joint token.

    ``features`` is ``(V, h, w, C)``; with ``return_slots`` the per-view
    concatenation (before the fusing linear map) is returned too.
    """
    dsa = model.prformer.layers[layer].cross
    f = _t(features, model.dtype)
    if f.ndim != 4 or f.shape[0] != len(model.cams):
        raise ShapeMismatchError(
            f"expected {len(model.cams)} feature maps (V, h, w, C), got {tuple(f.shape)}")
    q = _t(query, model.dtype).reshape(1, 1, -1)
    p = _t(proposal_joint, model.dtype).reshape(1, 1, 3)
    out, slots = dsa(q, p, model.cams, f.permute(0, 3, 1, 2)[None], return_slots=True)
    if return_slots:
        return out[0, 0], slots[0, 0]
    return out[0, 0]


def prformer_layer(model: EgoPoseFormer, layer: int, tokens, proposal, features):
    """Apply one refinement layer to ``(N_j, C')`` tokens; returns tokens and attention."""
    f = _t(features, model.dtype).permute(0, 3, 1, 2)[None]
    out, attn = model.prformer.layers[layer](_t(tokens, model.dtype)[None],
                                             _t(proposal, model.dtype)[None], model.cams, f)
    return out[0], attn[0]


def forward_stages(model: EgoPoseFormer, images) -> list[torch.Tensor]:
    """``(V, H, W, 3)`` images -> ``[P0, ..., PS]`` each ``(N_j, 3)``."""
    res = model(_t(images, model.dtype)[None])
    return [p[0] for p in res.stages]


@torch.no_grad()
def export_self_attention(model: EgoPoseFormer, samples, batch_size: int = 16) -> np.ndarray:
    """Self-attention weights averaged over samples, heads and layers."""
    samples = list(samples)
    if not samples:
        raise InvalidInputError("need at least one sample to export attention")
    n = model.cfg.num_joints
    if model.cfg.num_layers == 0:
        raise ContractError("model has no refinement layers, so no self-attention")
    total = torch.zeros(n, n, dtype=torch.float64)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        imgs = torch.as_tensor(np.stack([s.images for s in chunk])).to(model.dtype)
        attn = torch.stack(model(imgs).attention).to(torch.float64)    # (S, B, M, N, N)
        total += attn.mean(dim=(0, 2)).sum(dim=0)
    return (total / len(samples)).numpy()
