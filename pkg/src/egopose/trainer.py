"""Optimization harness: optimizer, schedule, pre-training, training,
gradient checking, proposal-noise ablation and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .camera import rig_from_json, rig_to_json
from .checkpoint import architecture_hash, checkpoint_bytes, load_checkpoint, parse_checkpoint
from .config import ModelConfig, TrainConfig, dtype_of
from .encoder import Encoder, strip_heatmap_head
from .errors import CheckpointError, InvalidInputError, NonFiniteError
from .metrics import MetricsReport, build_report, multi_stage_loss, per_joint_errors
from .model import EgoPoseFormer, build_model
from .skeleton import KinematicTree
from .synthdata import SyntheticDataset, render_heatmap_targets, split_train_val

__all__ = [
    "AdamState",
    "Checkpoint",
    "EncoderCheckpoint",
    "lr_at",
    "clip_gradients",
    "optimizer_step",
    "pretrain_heatmaps",
    "train",
    "grad_check",
    "ablate_proposal_noise",
    "evaluate",
    "configure_threads",
    "jitter_parameters",
    "predict",
    "model_config_for",
    "GradCheckResult",
]

log = logging.getLogger(__name__)


def configure_threads() -> None:
    """Cap torch intra-op threads from ``EGOPOSE_THREADS`` when set."""
    n = os.environ.get("EGOPOSE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# ------------------------------------------------------------ optimizer


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: one ``decay_factor`` per decay epoch already reached."""
    if not 0 <= epoch < cfg.epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {cfg.epochs})")
    decays = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.decay_factor ** decays


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def clip_gradients(grads: Mapping[str, torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.  Raises if any block is non-finite.
    """
    sq = torch.zeros((), dtype=torch.float64)
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter block {name!r}")
        sq = sq + (g.to(torch.float64) ** 2).sum()
    norm = float(torch.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


@torch.no_grad()
def optimizer_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                   state: AdamState, cfg: TrainConfig, lr: float) -> float:
    """One clipped Adam/AdamW update, applied in place.

    AdamW shrinks each parameter by ``lr * weight_decay`` before the Adam
    step; plain Adam instead adds ``weight_decay * param`` to the gradient.
    Returns the pre-clip gradient norm.
    """
    if params.keys() != grads.keys():
        raise InvalidInputError("parameter and gradient blocks differ")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise InvalidInputError(f"gradient shape mismatch for {name!r}")
    grads = {k: g.clone() for k, g in grads.items()}
    norm = clip_gradients(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if cfg.optimizer == "adamw":
            p.mul_(1.0 - lr * cfg.weight_decay)
        elif cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return norm


# ------------------------------------------------------------ checkpoints


def _rig_of(model: EgoPoseFormer) -> list:
    return rig_to_json(model.cameras)


@dataclass
class Checkpoint:
    """Full-model parameters plus the metadata needed to rebuild them."""

    model: EgoPoseFormer
    train_cfg: TrainConfig
    tree: KinematicTree
    step: int = 0
    rng_state: dict | None = None
    log: list[dict] = field(default_factory=list)

    @property
    def model_cfg(self) -> ModelConfig:
        return self.model.cfg

    def arch_hash(self) -> str:
        return architecture_hash({n: tuple(p.shape) for n, p in self.model.named_parameters()})

    def to_bytes(self) -> bytes:
        header = {
            "kind": "model",
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "skeleton": self.tree.to_dict(),
            "camera_rig": _rig_of(self.model),
            "step": self.step,
            "rng_state": self.rng_state,
        }
        return checkpoint_bytes(dict(self.model.named_parameters()), header)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        header, blocks = parse_checkpoint(data, source)
        if header.get("kind") != "model":
            raise CheckpointError(f"{source}: expected a model checkpoint, found {header.get('kind')!r}")
        mcfg = ModelConfig.from_dict(header["model_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        tree = KinematicTree.from_dict(header["skeleton"])
        model = EgoPoseFormer(mcfg, rig_from_json(header["camera_rig"]), tree.rest_pose()).to(tcfg.dtype)
        _load_blocks(model, blocks, header, source)
        return cls(model, tcfg, tree, header["step"], header.get("rng_state"))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))


def _load_blocks(module: torch.nn.Module, blocks: Mapping[str, np.ndarray], header: dict,
                 source: str, prefix: str = "") -> None:
    own = {n: p for n, p in module.named_parameters()}
    expected = architecture_hash({n: tuple(p.shape) for n, p in own.items()})
    if header["architecture_hash"] != expected:
        raise CheckpointError(
            f"{source}: architecture hash {header['architecture_hash']} does not match "
            f"the configured model ({expected})")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.as_tensor(blocks[prefix + name]))


@dataclass
class EncoderCheckpoint:
    """Pre-trained encoder, with or without its heatmap head."""

    encoder: Encoder
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    def arch_hash(self) -> str:
        return architecture_hash({n: tuple(p.shape) for n, p in self.encoder.named_parameters()})

    def stripped(self) -> "EncoderCheckpoint":
        enc = strip_heatmap_head(self.encoder)
        cfg = self.model_cfg.replace(heatmap_head=False)
        return EncoderCheckpoint(enc, cfg, self.train_cfg, self.step, list(self.loss_history))

    def to_bytes(self) -> bytes:
        header = {
            "kind": "encoder",
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "step": self.step,
            "has_head": self.encoder.has_head,
        }
        return checkpoint_bytes(dict(self.encoder.named_parameters()), header)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "EncoderCheckpoint":
        header, blocks = load_checkpoint(path)
        if header.get("kind") != "encoder":
            raise CheckpointError(f"{path}: expected an encoder checkpoint, found {header.get('kind')!r}")
        mcfg = ModelConfig.from_dict(header["model_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        enc = Encoder(mcfg).to(tcfg.dtype)
        _load_blocks(enc, blocks, header, str(path))
        return cls(enc, mcfg, tcfg, header["step"])


# ------------------------------------------------------------ data helpers


def _images(dataset: SyntheticDataset) -> np.ndarray:
    return np.stack([s.images for s in dataset.samples])


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_dataset(dataset: SyntheticDataset, model_cfg: ModelConfig) -> None:
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    if len(dataset.cameras) != model_cfg.views:
        raise InvalidInputError(
            f"dataset has {len(dataset.cameras)} views, model expects {model_cfg.views}")
    if dataset.tree.num_joints != model_cfg.num_joints:
        raise InvalidInputError(
            f"dataset skeleton has {dataset.tree.num_joints} joints, model expects {model_cfg.num_joints}")


def model_config_for(dataset: SyntheticDataset, **overrides) -> ModelConfig:
    """Model config whose views, joints and image size match ``dataset``."""
    cam = dataset.cameras[0]
    base = dict(num_joints=dataset.tree.num_joints, views=len(dataset.cameras),
                image_size=tuple(cam.image_size))
    base.update(overrides)
    return ModelConfig(**base)


# ------------------------------------------------------------ pre-training


def pretrain_heatmaps(dataset: SyntheticDataset, cfg: TrainConfig,
                      model_cfg: ModelConfig | None = None,
                      progress: Callable[[dict], None] | None = None) -> EncoderCheckpoint:
    """Fit the encoder plus heatmap head to Gaussian joint heatmaps (MSE).

    Views are treated as independent monocular images.  The returned
    checkpoint keeps the head; call :meth:`EncoderCheckpoint.stripped` for
    the variant used by main training.
    """
    configure_threads()
    model_cfg = (model_cfg or model_config_for(dataset)).replace(heatmap_head=True)
    _check_dataset(dataset, model_cfg)
    dtype = cfg.dtype
    encoder = Encoder(model_cfg).to(dtype)
    encoder.reset_parameters(torch.Generator().manual_seed(cfg.seed))

    images = _images(dataset)
    targets = np.stack([render_heatmap_targets(s.pose, s.cameras, 4, cfg.heatmap_sigma)
                        for s in dataset.samples]).astype(np.float32)
    params = dict(encoder.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        losses = []
        for idx in _batches(len(images), cfg.batch_size, rng):
            x = torch.as_tensor(images[idx]).to(dtype)
            y = torch.as_tensor(targets[idx]).to(dtype)
            encoder.zero_grad(set_to_none=True)
            loss = F.mse_loss(encoder.heatmaps(encoder(x)), y)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite pre-training loss at step {state.step}")
            loss.backward()
            if not history:
                history.append(loss.item())
            optimizer_step(params, {k: p.grad for k, p in params.items()}, state, cfg, lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if progress:
            progress({"phase": "pretrain", "epoch": epoch, "lr": lr, "loss": history[-1]})
    return EncoderCheckpoint(encoder, model_cfg, cfg, state.step, history)


# ------------------------------------------------------------ training


@torch.no_grad()
def predict(model: EgoPoseFormer, dataset: SyntheticDataset, batch_size: int = 32,
            proposals: np.ndarray | None = None) -> list[np.ndarray]:
    """Stage predictions ``[P0, ..., PS]``, each ``(B, N_j, 3)``."""
    model.eval()
    images = _images(dataset)
    out: list[list[np.ndarray]] = []
    for idx in _batches(len(images), batch_size, None):
        x = torch.as_tensor(images[idx]).to(model.dtype)
        prop = None if proposals is None else torch.as_tensor(proposals[idx]).to(model.dtype)
        res = model(x, proposal=prop)
        out.append([p.to(torch.float64).numpy() for p in res.stages])
    return [np.concatenate([o[s] for o in out]) for s in range(len(out[0]))]


def train(dataset: SyntheticDataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          init: EncoderCheckpoint | None = None, val_dataset: SyntheticDataset | None = None,
          log_path=None, progress: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train the full model on the multi-stage loss.

    ``val_dataset`` defaults to the held-out hash split of ``dataset``; the
    rest is used for training.  ``init`` seeds the encoder from a stripped
    pre-training checkpoint.
    """
    configure_threads()
    model_cfg = (model_cfg or model_config_for(dataset)).replace(heatmap_head=False)
    _check_dataset(dataset, model_cfg)
    if val_dataset is None:
        train_set, val_set = split_train_val(dataset, cfg.val_fraction)
    else:
        train_set, val_set = dataset, val_dataset
    if len(train_set) == 0:
        raise InvalidInputError("training split is empty")

    dtype = cfg.dtype
    model = build_model(model_cfg, dataset.cameras, dataset.tree.rest_pose(), cfg.seed, dtype)
    if init is not None:
        enc = init.encoder if not init.encoder.has_head else strip_heatmap_head(init.encoder)
        theirs = dict(enc.named_parameters())
        ours = dict(model.encoder.named_parameters())
        if architecture_hash({k: tuple(v.shape) for k, v in theirs.items()}) != \
                architecture_hash({k: tuple(v.shape) for k, v in ours.items()}):
            raise CheckpointError("pre-trained encoder does not match the model architecture")
        with torch.no_grad():
            for k, p in ours.items():
                p.copy_(theirs[k])

    images = _images(train_set)
    poses = train_set.poses()
    params = dict(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    entries: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            lr = lr_at(cfg, epoch)
            losses = []
            for idx in _batches(len(images), cfg.batch_size, rng):
                x = torch.as_tensor(images[idx]).to(dtype)
                gt = torch.as_tensor(poses[idx]).to(dtype)
                model.zero_grad(set_to_none=True)
                res = model(x)
                loss = multi_stage_loss(res.stages, gt, cfg.loss_reduction)
                if not torch.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss at step {state.step}")
                loss.backward()
                grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p))
                         for k, p in params.items()}
                optimizer_step(params, grads, state, cfg, lr)
                losses.append(loss.item())
            entry = {"step": state.step, "epoch": epoch, "lr": lr,
                     "loss": float(np.mean(losses))}
            if len(val_set):
                stages = predict(model, val_set)
                entry["val_mpjpe"] = float(per_joint_errors(stages[-1], val_set.poses()).mean())
                entry["val_stage_mpjpe"] = [float(per_joint_errors(s, val_set.poses()).mean())
                                            for s in stages]
            entries.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if progress:
                progress(entry)
            log.info("epoch %d lr %.1e loss %.3f val %s", epoch, lr, entry["loss"],
                     entry.get("val_mpjpe"))
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return Checkpoint(model, cfg, dataset.tree, state.step, rng.bit_generator.state, entries)


# ------------------------------------------------------------ evaluation


def evaluate(checkpoint: Checkpoint, dataset: SyntheticDataset) -> MetricsReport:
    """Metrics of the final stage on ``dataset`` (stage-wise MPJPE included)."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    model = checkpoint.model
    if len(dataset.cameras) != model.cfg.views:
        raise InvalidInputError(
            f"dataset has {len(dataset.cameras)} views, checkpoint expects {model.cfg.views}")
    if rig_to_json(dataset.cameras) != _rig_of(model):
        raise InvalidInputError("dataset camera rig differs from the checkpoint's rig")
    stages = predict(model, dataset)
    return build_report(stages[-1], dataset.poses(), [s.action for s in dataset],
                        dataset.cameras, dataset.tree.names, stage_preds=stages)


def ablate_proposal_noise(model: EgoPoseFormer, dataset: SyntheticDataset,
                          sigmas: Sequence[float], seed: int = 0) -> list[dict]:
    """Refine ground truth perturbed by isotropic Gaussian noise of each sigma (mm).

    Returns one ``{"sigma", "proposal_mpjpe", "refined_mpjpe"}`` row per sigma.
    """
    gts = dataset.poses()
    rows = []
    for i, sigma in enumerate(sigmas):
        rng = np.random.default_rng([seed, i])
        proposals = gts + sigma * rng.standard_normal(gts.shape)
        stages = predict(model, dataset, proposals=proposals)
        rows.append({
            "sigma": float(sigma),
            "proposal_mpjpe": float(per_joint_errors(proposals, gts).mean()),
            "refined_mpjpe": float(per_joint_errors(stages[-1], gts).mean()),
        })
    return rows


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_block: dict[str, float]
    coords_checked: int
    loss: float
    floor: float
    max_coord_error: float = 0.0
    analytic: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    numeric: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _stage_loss(model: EgoPoseFormer, images: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return multi_stage_loss(model(images).stages, gt)


def jitter_parameters(model: EgoPoseFormer, scale: float = 0.05, seed: int = 0) -> None:
    """Add small uniform noise to every parameter.

    Fresh models carry exact zeros (sampling offsets, offset heads) that
    make many gradients vanish identically; jittering gives the check
    something to measure.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in model.named_parameters():
            noise = torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1
            p.add_(scale * noise.to(p.dtype))


def _min_cell_distance(model: EgoPoseFormer, images: torch.Tensor) -> float:
    """Smallest distance (in feature cells) from any sampling location to a cell center line."""
    dists = []
    hooks = []

    def hook(mod, args, kwargs, out):
        query, ref, fmap = args[:3]
        h, w = fmap.shape[-2:]
        loc = mod.sampling_locations(query, ref, (h, w))
        gx = loc[..., 0] * w - 0.5
        gy = loc[..., 1] * h - 0.5
        dists.append(float(torch.minimum((gx - gx.round()).abs(), (gy - gy.round()).abs()).min()))

    for layer in model.prformer.layers:
        hooks.append(layer.cross.view_attn.register_forward_hook(hook, with_kwargs=True))
    try:
        with torch.no_grad():
            model(images)
    finally:
        for h in hooks:
            h.remove()
    return min(dists) if dists else math.inf


def nudge_off_cell_boundaries(model: EgoPoseFormer, images: torch.Tensor, guard: float = 1e-3,
                              seed: int = 0, max_tries: int = 50) -> None:
    """Shift sampling-offset biases until every bilinear sample sits at least
    ``guard`` cells away from the sampler's kinks."""
    gen = torch.Generator().manual_seed(seed)
    for _ in range(max_tries):
        if _min_cell_distance(model, images) >= guard:
            return
        with torch.no_grad():
            for layer in model.prformer.layers:
                b = layer.cross.view_attn.sampling_offsets.bias
                step = torch.rand(b.shape, generator=gen, dtype=torch.float64) - 0.5   # cells
                b.add_(step.to(b.dtype))
    raise RuntimeError("could not move sampling locations away from cell boundaries")


def grad_check(model: EgoPoseFormer, sample, eps: float = 1e-4, max_coords: int = 200,
               seed: int = 0, rel_floor: float = 1e-7, blocks: Sequence[str] | None = None,
               guard: float = 1e-3) -> GradCheckResult:
    """Compare autograd against central differences of the stage loss.

    Each parameter block is checked on all coordinates, or on a random
    subset of ``max_coords`` when larger.  The error of a block is
    ``||a - n|| / max(||a||, ||n||)`` over its checked coordinates and the
    headline ``max_rel_error`` is the worst block.  Individual components
    far below ``ulp(loss) / eps`` drown in cancellation noise, so the
    per-coordinate diagnostic ``max_coord_error`` uses
    ``|a - n| / max(|a|, |n|, rel_floor * |loss|)`` instead.
    """
    if model.dtype != torch.float64:
        raise InvalidInputError("gradient checking requires a 64-bit model")
    images = torch.as_tensor(np.asarray(sample.images)[None]).to(torch.float64)
    gt = torch.as_tensor(np.asarray(sample.pose)[None]).to(torch.float64)
    if model.cfg.num_layers:
        nudge_off_cell_boundaries(model, images, guard=guard, seed=seed)

    model.zero_grad(set_to_none=True)
    loss = _stage_loss(model, images, gt)
    loss.backward()
    floor = rel_floor * abs(loss.item())
    rng = np.random.default_rng(seed)
    per_block, analytic_all, numeric_all = {}, {}, {}
    total, coord_max = 0, 0.0
    for name, p in model.named_parameters():
        if blocks is not None and not any(name.startswith(b) for b in blocks):
            continue
        analytic = (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        flat = p.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        num = np.empty(len(idx))
        with torch.no_grad():
            for c, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = _stage_loss(model, images, gt).item()
                flat[i] = orig - eps
                fm = _stage_loss(model, images, gt).item()
                flat[i] = orig
                num[c] = (fp - fm) / (2 * eps)
        a = analytic[torch.as_tensor(idx)].numpy().copy()
        rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        coord_max = max(coord_max, float(rel.max()) if rel.size else 0.0)
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        per_block[name] = float(np.linalg.norm(a - num) / scale) if scale > 0 else 0.0
        analytic_all[name], numeric_all[name] = a, num
        total += len(idx)
    return GradCheckResult(max(per_block.values(), default=0.0), per_block, total,
                           float(loss.item()), floor, coord_max, analytic_all, numeric_all)
