"""Training loss and pose-error metrics (all distances in mm)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .camera import visibility_count
from .errors import InvalidInputError, ShapeMismatchError
from .skeleton import body_part

__all__ = [
    "multi_stage_loss",
    "mpjpe",
    "per_joint_errors",
    "procrustes_align",
    "pa_mpjpe",
    "MetricsReport",
    "build_report",
    "DEFAULT_CDF_THRESHOLDS",
]

DEFAULT_CDF_THRESHOLDS = tuple(float(t) for t in range(0, 301, 5))


def multi_stage_loss(stage_preds: Sequence, gt, reduction: str = "mean"):
    """Sum over stages and joints of per-joint L2 error.

    Works on ``(N_j, 3)`` or batched ``(B, N_j, 3)`` inputs; batched losses
    are reduced over samples with ``reduction`` (``"mean"`` or ``"sum"``).
    Torch inputs stay differentiable.
    """
    as_numpy = not torch.is_tensor(gt)
    gt_t = torch.as_tensor(np.asarray(gt, dtype=np.float64)) if as_numpy else gt
    total = 0.0
    for s, pred in enumerate(stage_preds):
        p = torch.as_tensor(np.asarray(pred, dtype=np.float64)) if not torch.is_tensor(pred) else pred
        if p.shape != gt_t.shape or p.shape[-1] != 3:
            raise ShapeMismatchError(
                f"stage {s} prediction shape {tuple(p.shape)} != ground truth {tuple(gt_t.shape)}")
        total = total + torch.linalg.vector_norm(p - gt_t, dim=-1).sum(-1)
    if gt_t.ndim == 3:
        total = total.mean() if reduction == "mean" else total.sum()
    if as_numpy:
        return float(total)
    return total


def _check_pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ShapeMismatchError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def per_joint_errors(pred, gt) -> np.ndarray:
    p, g = _check_pair(pred, gt)
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error."""
    return float(per_joint_errors(pred, gt).mean())


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity-align ``pred`` (``N_j x 3``) onto ``gt``.

    Returns ``s * R @ (pred - mean(pred)) + mean(gt)`` with the rotation
    (reflections excluded), scale and translation minimizing the squared
    residual.
    """
    p, g = _check_pair(pred, gt)
    if p.ndim != 2 or p.shape[0] < 3:
        raise InvalidInputError(f"Procrustes alignment needs at least 3 joints, got shape {p.shape}")
    mu_p, mu_g = p.mean(0), g.mean(0)
    x, y = p - mu_p, g - mu_g
    sv_g = np.linalg.svd(y, compute_uv=False)
    if sv_g[1] <= 1e-9 * max(sv_g[0], 1.0):
        raise InvalidInputError("degenerate ground truth: joints are collinear or coincident")
    var_x = (x ** 2).sum()
    if var_x <= 0:
        raise InvalidInputError("degenerate prediction: all joints coincide")
    # maximize tr(R^T Y^T X) -> H = X^T Y
    u, s, vt = np.linalg.svd(x.T @ y)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    d = 1.0 if d == 0 else d
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    scale = (s * np.diag(corr)).sum() / var_x
    return scale * x @ rot.T + mu_g


def pa_mpjpe(pred, gt) -> float:
    return mpjpe(procrustes_align(pred, gt), gt)


@dataclass
class MetricsReport:
    mpjpe: float
    pa_mpjpe: float
    num_samples: int
    per_action: dict[str, dict[str, float]] = field(default_factory=dict)
    per_joint: dict[str, float] = field(default_factory=dict)
    per_visibility: dict[str, dict[str, float]] = field(default_factory=dict)
    cdf: list[tuple[float, float]] = field(default_factory=list)
    stage_mpjpe: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cdf"] = [list(x) for x in self.cdf]
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        d["cdf"] = [tuple(x) for x in d["cdf"]]
        return cls(**d)

    def cdf_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_mm", "fraction"])
            w.writerows(self.cdf)


def build_report(preds, gts, actions: Sequence[str] | None = None,
                 cameras=None, joint_names: Sequence[str] | None = None,
                 cdf_thresholds: Sequence[float] = DEFAULT_CDF_THRESHOLDS,
                 stage_preds=None) -> MetricsReport:
    """Aggregate errors of aligned prediction / ground-truth lists.

    ``preds`` and ``gts`` are ``(B, N_j, 3)``.  Visibility strata count the
    views that see each ground-truth joint.  ``stage_preds`` (``S+1`` arrays
    of the same shape) adds stage-wise MPJPE for diagnostics.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 3:
        raise ShapeMismatchError(f"predictions {preds.shape} and ground truth {gts.shape} differ")
    b, n, _ = preds.shape
    if b == 0:
        raise InvalidInputError("cannot build a report from zero samples")
    if actions is not None and len(actions) != b:
        raise ShapeMismatchError(f"{len(actions)} action labels for {b} samples")
    names = list(joint_names) if joint_names is not None else [f"joint{j}" for j in range(n)]
    if len(names) != n:
        raise ShapeMismatchError(f"{len(names)} joint names for {n} joints")

    errs = per_joint_errors(preds, gts)                       # (B, N)
    sample_mpjpe = errs.mean(axis=1)
    sample_pa = np.array([pa_mpjpe(p, g) for p, g in zip(preds, gts)])

    per_action = {}
    if actions is not None:
        acts = np.asarray(actions)
        for a in sorted(set(actions)):
            m = acts == a
            per_action[a] = {"mpjpe": float(sample_mpjpe[m].mean()),
                             "pa_mpjpe": float(sample_pa[m].mean())}

    per_joint = {name: float(errs[:, j].mean()) for j, name in enumerate(names)}

    per_visibility = {}
    if cameras is not None:
        counts = np.stack([visibility_count(g, cameras) for g in gts])     # (B, N)
        parts = np.array([body_part(nm) for nm in names])
        for c in range(len(cameras) + 1):
            m = counts == c
            if not m.any():
                continue
            row = {}
            for part in dict.fromkeys(parts):
                pm = m & (parts == part)[None, :]
                if pm.any():
                    row[part] = float(errs[pm].mean())
            row["all"] = float(errs[m].mean())
            per_visibility[str(c)] = row

    flat = np.sort(errs.reshape(-1))
    cdf = [(float(t), float(np.searchsorted(flat, t, side="right") / flat.size))
           for t in sorted(cdf_thresholds)]

    stage_mpjpe = []
    if stage_preds is not None:
        stage_mpjpe = [float(per_joint_errors(np.asarray(sp), gts).mean()) for sp in stage_preds]

    return MetricsReport(
        mpjpe=float(errs.mean()),
        pa_mpjpe=float(sample_pa.mean()),
        num_samples=b,
        per_action=per_action,
        per_joint=per_joint,
        per_visibility=per_visibility,
        cdf=cdf,
        stage_mpjpe=stage_mpjpe,
    )
