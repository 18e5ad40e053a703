"""Equidistant fish-eye cameras for a head-mounted rig.

Points live in the *device frame* (millimeters, origin at the headset,
x right, y forward, z up).  A camera maps them into its own frame with
``p = rotation @ point + translation`` and then projects with the
equidistant model ``r = focal * theta``.

Pixel coordinates are continuous: pixel ``i`` covers ``[i, i + 1)``, so the
center of pixel ``i`` sits at ``i + 0.5``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, InvalidInputError

__all__ = [
    "FisheyeCamera",
    "Projection2D",
    "project",
    "project_points",
    "to_normalized_feature_coords",
    "visibility_count",
    "default_rig",
    "rig_to_json",
    "rig_from_json",
    "save_rig",
    "load_rig",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class FisheyeCamera:
    """Intrinsics plus the rigid device-to-camera transform of one view."""

    focal: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]
    theta_max: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "principal_point",
                           (float(self.principal_point[0]), float(self.principal_point[1])))
        object.__setattr__(self, "image_size",
                           (int(self.image_size[0]), int(self.image_size[1])))
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "theta_max", float(self.theta_max))

        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise InvalidInputError("camera extrinsics must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise InvalidInputError("camera rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("camera rotation must have determinant +1")
        if not self.focal > 0:
            raise InvalidInputError(f"focal must be positive, got {self.focal}")
        if not 0 < self.theta_max <= math.pi:
            raise InvalidInputError(f"theta_max must lie in (0, pi], got {self.theta_max}")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise InvalidInputError(f"image_size must be positive, got {self.image_size}")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Optical center in the device frame."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "cx": self.principal_point[0],
            "cy": self.principal_point[1],
            "width": self.image_size[0],
            "height": self.image_size[1],
            "theta_max": self.theta_max,
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FisheyeCamera":
        try:
            return cls(
                focal=d["focal"],
                principal_point=(d["cx"], d["cy"]),
                image_size=(d["width"], d["height"]),
                theta_max=d["theta_max"],
                rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["translation"], dtype=np.float64),
            )
        except KeyError as exc:
            raise InvalidInputError(f"camera entry missing field {exc.args[0]!r}") from None

    def __eq__(self, other):
        if not isinstance(other, FisheyeCamera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))


@dataclass(frozen=True)
class Projection2D:
    u: float
    v: float
    visible: bool


def project_points(cam: FisheyeCamera, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of ``(..., 3)`` device-frame points.

    Returns
    -------
    u, v : ndarray
        Pixel coordinates, shape ``points.shape[:-1]``.
    visible : ndarray of bool
        True where the incidence angle is within ``theta_max`` and the
        pixel falls inside the image.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise InvalidInputError(f"points must have a trailing dimension of 3, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points must be finite")

    p = pts @ cam.rotation.T + cam.translation
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(px, py)
    theta = np.arctan2(rho, pz)
    phi = np.arctan2(py, px)
    r = cam.focal * theta
    cx, cy = cam.principal_point
    u = cx + r * np.cos(phi)
    v = cy + r * np.sin(phi)

    at_center = (rho == 0) & (pz == 0)
    u = np.where(at_center, cx, u)
    v = np.where(at_center, cy, v)
    visible = (
        (theta <= cam.theta_max)
        & (u >= 0) & (u < cam.width)
        & (v >= 0) & (v < cam.height)
        & ~at_center
    )
    return u, v, visible


def project(cam: FisheyeCamera, point) -> Projection2D:
    """Project a single device-frame point (mm) into ``cam``."""
    pt = np.asarray(point, dtype=np.float64)
    if pt.shape != (3,):
        raise InvalidInputError(f"point must be a 3-vector, got shape {pt.shape}")
    u, v, vis = project_points(cam, pt)
    return Projection2D(float(u), float(v), bool(vis))


def to_normalized_feature_coords(proj: Projection2D, image_size, feature_size=None):
    """Map a visible projection to ``[0, 1)^2`` sampling coordinates.

    The normalized coordinate is resolution independent, so the same value
    addresses the image and its stride-4 feature grid; ``feature_size`` is
    accepted for symmetry with the sampler and otherwise unused.
    """
    if not proj.visible:
        raise ContractError("cannot normalize an invisible projection")
    width, height = image_size
    return proj.u / width, proj.v / height


def visibility_count(pose, cams: Sequence[FisheyeCamera]) -> np.ndarray:
    """Number of cameras that see each joint of ``pose`` (``N_j x 3``)."""
    pts = np.asarray(pose, dtype=np.float64)
    counts = np.zeros(pts.shape[:-1], dtype=np.int64)
    for cam in cams:
        counts += project_points(cam, pts)[2]
    return counts


def look_down_rotation(pitch: float = 0.0) -> np.ndarray:
    """Device-to-camera rotation for an optical axis along device -z.

    ``pitch`` tilts the axis toward device +y (forward), in radians.
    """
    base = np.array([[1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0],
                     [0.0, 0.0, -1.0]])
    c, s = math.cos(pitch), math.sin(pitch)
    # rotation about the camera x axis
    tilt = np.array([[1.0, 0.0, 0.0],
                     [0.0, c, s],
                     [0.0, -s, c]])
    return tilt @ base


def default_rig(image_size=(64, 64), theta_max=1.4, baseline=20.0, pitch=0.0,
                mount_offset=10.0, views=2) -> list[FisheyeCamera]:
    """Stereo rig with parallel downward optical axes.

    Camera centers sit at ``x = -baseline/2`` (left) and ``+baseline/2``
    (right), ``mount_offset`` mm in front of the head origin.  The focal
    length is chosen so the ``theta_max`` circle just fits the image.
    With ``views=1`` only the left camera is returned.
    """
    width, height = image_size
    focal = 0.5 * min(width, height) / theta_max
    rot = look_down_rotation(pitch)
    cams = []
    for x in (-0.5 * baseline, 0.5 * baseline)[:views]:
        center = np.array([x, mount_offset, 0.0])
        cams.append(FisheyeCamera(
            focal=focal,
            principal_point=(0.5 * width, 0.5 * height),
            image_size=(width, height),
            theta_max=theta_max,
            rotation=rot,
            translation=-rot @ center,
        ))
    return cams


def rig_to_json(cams: Sequence[FisheyeCamera]) -> list[dict]:
    return [cam.to_dict() for cam in cams]


def rig_from_json(entries) -> list[FisheyeCamera]:
    if not isinstance(entries, list) or not entries:
        raise InvalidInputError("camera rig must be a non-empty JSON array")
    return [FisheyeCamera.from_dict(e) for e in entries]


def save_rig(cams: Sequence[FisheyeCamera], path) -> None:
    Path(path).write_text(json.dumps(rig_to_json(cams), indent=2))


def load_rig(path) -> list[FisheyeCamera]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"camera rig file not found: {path}")
    return rig_from_json(json.loads(path.read_text()))
