"""Synthetic stereo fish-eye views, heatmap targets and dataset I/O.

Images are rendered by splatting one colored Gaussian blob per visible
joint.  Blobs are composited far-to-near, so a nearer joint covers a
farther one: a crude form of self-occlusion.

On-disk layout::

    <dir>/manifest.json          schema version, count, skeleton, rig, ids
    <dir>/<id>/meta.json         action, seed, cameras, image shape/mode
    <dir>/<id>/pose.json         joint coordinates (mm)
    <dir>/<id>/view<k>.raw       little-endian float32 H x W x 3 (or .png)
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .camera import FisheyeCamera, project_points, rig_from_json, rig_to_json
from .errors import DatasetError, InvalidInputError
from .skeleton import ACTION_CATEGORIES, KinematicTree, forward_kinematics, sample_pose

__all__ = [
    "RenderConfig",
    "Sample",
    "SyntheticDataset",
    "joint_palette",
    "render_views",
    "render_heatmap_targets",
    "make_sample",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "split_train_val",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RenderConfig:
    sigma_px: float = 1.5
    noise: float = 0.05


@dataclass
class Sample:
    images: np.ndarray                 # (V, H, W, 3) float32 in [0, 1]
    pose: np.ndarray                   # (N_j, 3) float64, mm
    cameras: list[FisheyeCamera]
    action: str
    seed: int
    id: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InvalidInputError(f"images must be V x H x W x 3, got {self.images.shape}")
        if self.images.shape[0] != len(self.cameras) or not self.cameras:
            raise InvalidInputError("need one camera per view and at least one view")


@dataclass
class SyntheticDataset:
    """A list of samples together with the skeleton and rig they share."""

    samples: list[Sample]
    tree: KinematicTree
    cameras: list[FisheyeCamera]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return SyntheticDataset(self.samples[idx], self.tree, self.cameras, dict(self.meta))
        return self.samples[idx]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def subset(self, indices) -> "SyntheticDataset":
        return SyntheticDataset([self.samples[i] for i in indices], self.tree,
                                self.cameras, dict(self.meta))

    def with_views(self, views: Sequence[int]) -> "SyntheticDataset":
        """Keep only the listed camera views (e.g. ``[0]`` for monocular)."""
        views = list(views)
        cams = [self.cameras[k] for k in views]
        samples = [Sample(s.images[views], s.pose, [s.cameras[k] for k in views],
                          s.action, s.seed, s.id) for s in self.samples]
        return SyntheticDataset(samples, self.tree, cams, dict(self.meta))

    def poses(self) -> np.ndarray:
        return np.stack([s.pose for s in self.samples])

    def images(self) -> np.ndarray:
        return np.stack([s.images for s in self.samples])


def joint_palette(num_joints: int) -> np.ndarray:
    """Fixed, well-separated RGB colors, one per joint."""
    golden = 0.618033988749895
    colors = []
    for j in range(num_joints):
        hue = (j * golden) % 1.0
        value = 1.0 if j % 2 == 0 else 0.7
        colors.append(colorsys.hsv_to_rgb(hue, 0.9, value))
    return np.asarray(colors)


def _pixel_grid(height, width):
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    return ys[:, None], xs[None, :]


def render_views(pose, cameras: Sequence[FisheyeCamera], render_cfg: RenderConfig | None = None,
                 seed=0, noise: bool = True) -> np.ndarray:
    """Render one float32 image per camera.

    With ``noise=False`` the images are returned before background noise is
    added, which is what the peak-color property is stated against.
    """
    cfg = render_cfg or RenderConfig()
    pose = np.asarray(pose, dtype=np.float64)
    palette = joint_palette(len(pose))
    rng = np.random.default_rng(seed)
    views = []
    for cam in cameras:
        width, height = cam.image_size
        u, v, visible = project_points(cam, pose)
        dist = np.linalg.norm(pose @ cam.rotation.T + cam.translation, axis=-1)
        img = np.zeros((height, width, 3))
        ys, xs = _pixel_grid(height, width)
        # far to near: nearer blobs are painted last and cover farther ones
        for j in sorted(np.flatnonzero(visible), key=lambda j: (-dist[j], j)):
            d2 = (xs - u[j]) ** 2 + (ys - v[j]) ** 2
            alpha = np.exp(-d2 / (2.0 * cfg.sigma_px ** 2))[..., None]
            img = img * (1.0 - alpha) + alpha * palette[j]
        if noise and cfg.noise > 0:
            img = img + rng.uniform(0.0, cfg.noise, size=img.shape)
        views.append(np.clip(img, 0.0, 1.0))
    return np.stack(views).astype(np.float32)


def render_heatmap_targets(pose, cameras: Sequence[FisheyeCamera], stride: int = 4,
                           sigma: float = 2.0) -> np.ndarray:
    """Unnormalized Gaussian joint heatmaps, ``V x N_j x h x w``.

    Cell ``(i, j)`` is evaluated at its center ``(j + 0.5, i + 0.5)`` in
    feature-grid units; invisible joints get an all-zero map.
    """
    pose = np.asarray(pose, dtype=np.float64)
    maps = []
    for cam in cameras:
        width, height = cam.image_size
        if width % stride or height % stride:
            raise InvalidInputError(f"stride {stride} does not divide image size {cam.image_size}")
        h, w = height // stride, width // stride
        u, v, visible = project_points(cam, pose)
        ys, xs = _pixel_grid(h, w)
        cu, cv = u / stride, v / stride
        d2 = (xs[None] - cu[:, None, None]) ** 2 + (ys[None] - cv[:, None, None]) ** 2
        hm = np.exp(-d2 / (2.0 * sigma ** 2))
        hm[~visible] = 0.0
        maps.append(hm)
    return np.stack(maps)


def make_sample(tree: KinematicTree, cameras: Sequence[FisheyeCamera], seed: int,
                action: str | None = None, render_cfg: RenderConfig | None = None,
                sample_id: str = "", actions: Sequence[str] | None = None) -> Sample:
    """Draw one sample; everything downstream of ``seed`` is deterministic."""
    pose_seq, render_seq, action_seq = np.random.SeedSequence(seed).spawn(3)
    if action is None:
        choices = sorted(actions or ACTION_CATEGORIES)
        action = choices[int(np.random.default_rng(action_seq).integers(len(choices)))]
    rotations = sample_pose(tree, pose_seq, action)
    pose = forward_kinematics(tree, rotations)
    images = render_views(pose, cameras, render_cfg, seed=render_seq)
    return Sample(images, pose, list(cameras), action, int(seed), sample_id)


def generate_dataset(num_samples: int, tree: KinematicTree, cameras: Sequence[FisheyeCamera],
                     seed: int = 0, render_cfg: RenderConfig | None = None,
                     actions: Sequence[str] | None = None, prefix: str = "") -> SyntheticDataset:
    """Generate ``num_samples`` samples; sample ``i`` uses seed ``(seed, i)``."""
    samples = []
    for i in range(num_samples):
        sample_seed = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint32)[0])
        samples.append(make_sample(tree, cameras, sample_seed, render_cfg=render_cfg,
                                   sample_id=f"{prefix}{i:06d}", actions=actions))
    cfg = render_cfg or RenderConfig()
    meta = {"seed": seed, "sigma_px": cfg.sigma_px, "noise": cfg.noise}
    return SyntheticDataset(samples, tree, list(cameras), meta)


def split_train_val(dataset: SyntheticDataset, val_fraction: float = 0.1):
    """Deterministic split keyed on a stable hash of each sample id."""
    import hashlib

    train, val = [], []
    for i, s in enumerate(dataset.samples):
        key = s.id or f"{i:06d}"
        h = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        (val if h / 2 ** 64 < val_fraction else train).append(i)
    return dataset.subset(train), dataset.subset(val)


# ---------------------------------------------------------------- I/O


def _write_image(path: Path, img: np.ndarray, mode: str) -> None:
    if mode == "raw":
        path.write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
    else:
        from PIL import Image

        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def _read_image(path: Path, mode: str, height: int, width: int) -> np.ndarray:
    if mode == "raw":
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
        if data.size != height * width * 3:
            raise ValueError(f"expected {height * width * 3} floats, found {data.size}")
        return data.reshape(height, width, 3).astype(np.float32)
    from PIL import Image

    return (np.asarray(Image.open(path), dtype=np.float32) / 255.0).reshape(height, width, 3)


def write_dataset(dataset: SyntheticDataset, directory, image_mode: str = "raw") -> Path:
    if image_mode not in ("raw", "png"):
        raise InvalidInputError(f"image_mode must be 'raw' or 'png', got {image_mode!r}")
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(dataset.samples):
        sid = s.id or f"{i:06d}"
        ids.append(sid)
        sdir = root / sid
        sdir.mkdir(exist_ok=True)
        ext = "raw" if image_mode == "raw" else "png"
        meta = {
            "id": sid,
            "action": s.action,
            "seed": s.seed,
            "views": int(s.images.shape[0]),
            "height": int(s.images.shape[1]),
            "width": int(s.images.shape[2]),
            "image_mode": image_mode,
            "dtype": "<f4",
            "cameras": rig_to_json(s.cameras),
        }
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1))
        (sdir / "pose.json").write_text(json.dumps({"joints": s.pose.tolist()}))
        for k, img in enumerate(s.images):
            _write_image(sdir / f"view{k}.{ext}", img, image_mode)
    if len(set(ids)) != len(ids):
        raise InvalidInputError("sample ids must be unique")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "sample_count": len(ids),
        "image_mode": image_mode,
        "lossy": image_mode == "png",
        "skeleton": dataset.tree.to_dict(),
        "camera_rig": rig_to_json(dataset.cameras),
        "meta": dataset.meta,
        "samples": ids,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def read_manifest(directory) -> dict:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest found in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema version {manifest.get('schema_version')!r} in {path}")
    if manifest.get("sample_count") != len(manifest.get("samples", [])):
        raise DatasetError(f"manifest {path}: sample_count does not match the sample list")
    return manifest


def read_dataset(directory) -> SyntheticDataset:
    root = Path(directory)
    manifest = read_manifest(root)
    samples = []
    for sid in manifest["samples"]:
        sdir = root / sid
        try:
            meta = json.loads((sdir / "meta.json").read_text())
            pose = np.asarray(json.loads((sdir / "pose.json").read_text())["joints"],
                              dtype=np.float64)
            ext = "raw" if meta["image_mode"] == "raw" else "png"
            images = np.stack([
                _read_image(sdir / f"view{k}.{ext}", meta["image_mode"], meta["height"], meta["width"])
                for k in range(meta["views"])
            ])
            cams = rig_from_json(meta["cameras"])
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"sample {sid!r}: missing or corrupt files ({exc})") from None
        samples.append(Sample(images, pose, cams, meta["action"], meta["seed"], sid))
    return SyntheticDataset(samples, KinematicTree.from_dict(manifest["skeleton"]),
                            rig_from_json(manifest["camera_rig"]), manifest.get("meta", {}))
