"""Kinematic tree, forward kinematics and action-conditioned pose sampling.

A pose is an ``(N_j, 3)`` float64 array of joint positions in millimeters,
device frame (x right, y forward, z up).  Joint rotations are intrinsic
Euler angles ``(ax, ay, az)`` composed as ``Rz(az) @ Ry(ay) @ Rx(ax)``.

Each joint ``j`` owns the bone that connects it to its parent.  Its global
orientation is ``G_j = G_parent @ Rest_j @ R_j`` and its position is
``parent + G_j @ (0, 0, -bone_length)``.  The root has no bone and sits at
``root_offset`` with orientation ``Rest_root @ R_root``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "KinematicTree",
    "default_tree",
    "euler_to_matrix",
    "forward_kinematics",
    "sample_pose",
    "ACTION_CATEGORIES",
    "body_part",
]


def euler_to_matrix(angles) -> np.ndarray:
    """Rotation matrices for ``(..., 3)`` angles ``(ax, ay, az)``."""
    a = np.asarray(angles, dtype=np.float64)
    cx, cy, cz = np.cos(a[..., 0]), np.cos(a[..., 1]), np.cos(a[..., 2])
    sx, sy, sz = np.sin(a[..., 0]), np.sin(a[..., 1]), np.sin(a[..., 2])
    out = np.empty(a.shape[:-1] + (3, 3))
    # Rz @ Ry @ Rx written out
    out[..., 0, 0] = cz * cy
    out[..., 0, 1] = cz * sy * sx - sz * cx
    out[..., 0, 2] = cz * sy * cx + sz * sx
    out[..., 1, 0] = sz * cy
    out[..., 1, 1] = sz * sy * sx + cz * cx
    out[..., 1, 2] = sz * sy * cx - cz * sx
    out[..., 2, 0] = -sy
    out[..., 2, 1] = cy * sx
    out[..., 2, 2] = cy * cx
    return out


@dataclass(frozen=True)
class KinematicTree:
    names: tuple[str, ...]
    parents: tuple[int, ...]          # -1 for the root
    bone_lengths: np.ndarray          # (N,), mm; ignored for the root
    rotation_limits: np.ndarray       # (N, 3, 2) radians, [axis, (min, max)]
    rest_angles: np.ndarray           # (N, 3)
    root_offset: np.ndarray           # (3,), mm

    def __post_init__(self):
        n = len(self.names)
        for attr, shape in (("bone_lengths", (n,)), ("rotation_limits", (n, 3, 2)),
                            ("rest_angles", (n, 3)), ("root_offset", (3,))):
            arr = np.array(getattr(self, attr), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidInputError(f"{attr} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))

        if len(self.parents) != n:
            raise InvalidInputError("parents and names differ in length")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise InvalidInputError("tree must have exactly one root, at index 0")
        for j, p in enumerate(self.parents[1:], start=1):
            if not p < j:
                raise InvalidInputError(f"joint {self.names[j]!r}: parent index {p} is not < {j}")
            if not self.bone_lengths[j] > 0:
                raise InvalidInputError(f"joint {self.names[j]!r}: bone length must be positive")
        if np.any(self.rotation_limits[..., 0] > self.rotation_limits[..., 1]):
            raise InvalidInputError("rotation limit min exceeds max")

    @property
    def num_joints(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def truncate(self, n: int) -> "KinematicTree":
        """The sub-tree made of the first ``n`` joints."""
        if not 1 <= n <= self.num_joints:
            raise InvalidInputError(f"cannot truncate a {self.num_joints}-joint tree to {n}")
        return KinematicTree(self.names[:n], self.parents[:n], self.bone_lengths[:n],
                             self.rotation_limits[:n], self.rest_angles[:n], self.root_offset)

    def rest_pose(self) -> np.ndarray:
        return forward_kinematics(self, np.zeros((self.num_joints, 3)))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "bone_lengths": self.bone_lengths.tolist(),
            "rotation_limits": self.rotation_limits.tolist(),
            "rest_angles": self.rest_angles.tolist(),
            "root_offset": self.root_offset.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicTree":
        return cls(d["names"], d["parents"], d["bone_lengths"], d["rotation_limits"],
                   d["rest_angles"], d["root_offset"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "KinematicTree":
        return cls.from_dict(json.loads(Path(path).read_text()))


def body_part(name: str) -> str:
    """``"L_Hand"`` -> ``"Hand"``; unsided names are returned unchanged."""
    return name[2:] if name[:2] in ("L_", "R_") else name


# name, parent, bone length (mm), rest angles, limits per axis.
# Limits are written for the left side; right-side joints mirror the y and z axes.
_LEFT_CHAIN = [
    ("UpperArm", "Neck", 170.0, (0.0, 1.40, 0.0), ((-0.2, 0.2), (-0.15, 0.25), (-0.3, 0.3))),
    ("LowerArm", "UpperArm", 290.0, (0.0, -1.40, 0.0), ((-1.0, 3.0), (-0.5, 2.4), (-0.8, 0.8))),
    ("Hand", "LowerArm", 260.0, (0.0, 0.0, 0.0), ((0.0, 2.4), (-0.3, 0.3), (-0.5, 0.5))),
    ("Thigh", "Neck", 520.0, (0.0, 0.17, 0.0), ((-0.15, 0.15), (-0.1, 0.1), (-0.1, 0.1))),
    ("Calf", "Thigh", 450.0, (0.0, -0.17, 0.0), ((-0.6, 2.0), (-0.3, 0.8), (-0.5, 0.5))),
    ("Foot", "Calf", 430.0, (0.0, 0.0, 0.0), ((-2.4, 0.0), (-0.1, 0.1), (-0.1, 0.1))),
    ("Toe", "Foot", 150.0, (1.40, 0.0, 0.0), ((-0.4, 0.4), (-0.2, 0.2), (-0.2, 0.2))),
]


def default_tree() -> KinematicTree:
    """16-joint body: Head, Neck and left/right arm and leg chains."""
    names = ["Head", "Neck"]
    parents = [-1, 0]
    lengths = [0.0, 200.0]
    rest = [(0.0, 0.0, 0.0), (0.0, 0.0, 0.0)]
    limits = [((-0.5, 0.5), (-0.3, 0.3), (-0.5, 0.5)),
              ((-0.3, 0.6), (-0.25, 0.25), (-0.4, 0.4))]
    for side in ("L", "R"):
        sign = 1.0 if side == "L" else -1.0
        for part, parent, length, (rx, ry, rz), (lx, ly, lz) in _LEFT_CHAIN:
            names.append(f"{side}_{part}")
            parents.append(names.index(parent if parent == "Neck" else f"{side}_{parent}"))
            lengths.append(length)
            rest.append((rx, sign * ry, sign * rz))
            if sign < 0:
                ly, lz = (-ly[1], -ly[0]), (-lz[1], -lz[0])
            limits.append((lx, ly, lz))
    # reorder to the conventional grouping: arms first, then legs
    order = [0, 1] + [names.index(f"{s}_{p}") for s in "LR" for p in ("UpperArm", "LowerArm", "Hand")] \
        + [names.index(f"{s}_{p}") for s in "LR" for p in ("Thigh", "Calf", "Foot", "Toe")]
    remap = {old: new for new, old in enumerate(order)}
    return KinematicTree(
        names=[names[i] for i in order],
        parents=[-1 if parents[i] < 0 else remap[parents[i]] for i in order],
        bone_lengths=[lengths[i] for i in order],
        rotation_limits=[limits[i] for i in order],
        rest_angles=[rest[i] for i in order],
        root_offset=(0.0, -80.0, 0.0),
    )


def forward_kinematics(tree: KinematicTree, rotations, check_limits: bool = True) -> np.ndarray:
    """Joint positions for per-joint Euler angles ``rotations`` (``N_j x 3``)."""
    rot = np.asarray(rotations, dtype=np.float64)
    n = tree.num_joints
    if rot.shape != (n, 3):
        raise InvalidInputError(f"rotations must have shape ({n}, 3), got {rot.shape}")
    if not np.all(np.isfinite(rot)):
        raise InvalidInputError("rotations must be finite")
    if check_limits:
        lo, hi = tree.rotation_limits[..., 0], tree.rotation_limits[..., 1]
        bad = np.argwhere((rot < lo) | (rot > hi))
        if bad.size:
            j, ax = bad[0]
            raise InvalidInputError(
                f"rotation of joint {tree.names[j]!r} about axis {'xyz'[ax]} = {rot[j, ax]:.4f} "
                f"outside limits [{lo[j, ax]:.4f}, {hi[j, ax]:.4f}]")

    local = euler_to_matrix(tree.rest_angles) @ euler_to_matrix(rot)
    glob = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    glob[0] = local[0]
    pos[0] = tree.root_offset
    for j in range(1, n):
        p = tree.parents[j]
        glob[j] = glob[p] @ local[j]
        pos[j] = pos[p] - glob[j][:, 2] * tree.bone_lengths[j]
    return pos


def _range(lo, hi):
    return (float(lo), float(hi))


# Per-category sub-ranges, written for the left side (right mirrors y/z).
# Joints or axes not listed use _NEUTRAL_HALF_WIDTH around zero, clipped to limits.
_NEUTRAL_HALF_WIDTH = 0.1

ACTION_CATEGORIES: dict[str, dict[str, dict[int, tuple[float, float]]]] = {
    "stand": {
        "Head": {0: _range(-0.3, 0.3), 2: _range(-0.3, 0.3)},
        "LowerArm": {0: _range(-0.3, 0.5), 1: _range(0.0, 0.4)},
        "Hand": {0: _range(0.0, 1.2)},
        "Calf": {0: _range(-0.1, 0.1), 1: _range(0.0, 0.1)},
        "Foot": {0: _range(-0.1, 0.0)},
    },
    "walk": {
        "Head": {0: _range(-0.3, 0.3), 2: _range(-0.3, 0.3)},
        "LowerArm": {0: _range(-0.6, 0.6), 1: _range(0.0, 0.3)},
        "Hand": {0: _range(0.0, 0.8)},
        "Calf": {0: _range(-0.5, 0.6), 1: _range(0.0, 0.2)},
        "Foot": {0: _range(-1.0, 0.0)},
        "Toe": {0: _range(-0.3, 0.3)},
    },
    "crouch": {
        "Head": {0: _range(-0.4, 0.3)},
        "Neck": {0: _range(0.2, 0.6)},
        "LowerArm": {0: _range(0.0, 1.2), 1: _range(0.0, 0.6)},
        "Hand": {0: _range(0.3, 1.8)},
        "Calf": {0: _range(1.0, 2.0), 1: _range(0.1, 0.6)},
        "Foot": {0: _range(-2.4, -1.4)},
        "Toe": {0: _range(-0.4, 0.4)},
    },
    "reach": {
        "Head": {0: _range(-0.3, 0.3), 2: _range(-0.4, 0.4)},
        "Neck": {0: _range(0.0, 0.4)},
        "LowerArm": {0: _range(0.8, 1.8), 1: _range(-0.3, 0.6), 2: _range(-0.5, 0.5)},
        "Hand": {0: _range(0.0, 1.0)},
        "Calf": {0: _range(-0.1, 0.3)},
        "Foot": {0: _range(-0.4, 0.0)},
    },
    "stretch": {
        "Head": {0: _range(-0.5, 0.2), 2: _range(-0.3, 0.3)},
        "Neck": {0: _range(-0.3, 0.1)},
        "LowerArm": {0: _range(1.5, 3.0), 1: _range(0.8, 2.4)},
        "Hand": {0: _range(0.0, 0.6)},
        "Calf": {0: _range(-0.3, 0.3), 1: _range(0.0, 0.5)},
        "Foot": {0: _range(-0.5, 0.0)},
    },
}


def category_ranges(tree: KinematicTree, action_category: str) -> np.ndarray:
    """``(N_j, 3, 2)`` sampling sub-ranges of ``action_category``."""
    try:
        category = ACTION_CATEGORIES[action_category]
    except KeyError:
        raise InvalidInputError(
            f"unknown action category {action_category!r}; "
            f"known categories: {', '.join(sorted(ACTION_CATEGORIES))}") from None
    limits = tree.rotation_limits
    ranges = np.empty_like(limits)
    ranges[..., 0] = np.maximum(limits[..., 0], -_NEUTRAL_HALF_WIDTH)
    ranges[..., 1] = np.minimum(limits[..., 1], _NEUTRAL_HALF_WIDTH)
    for j, name in enumerate(tree.names):
        overrides = category.get(body_part(name), {})
        mirror = name.startswith("R_")
        for axis, (lo, hi) in overrides.items():
            if mirror and axis in (1, 2):
                lo, hi = -hi, -lo
            ranges[j, axis] = (lo, hi)
    ranges[..., 0] = np.clip(ranges[..., 0], limits[..., 0], limits[..., 1])
    ranges[..., 1] = np.clip(ranges[..., 1], limits[..., 0], limits[..., 1])
    return ranges


def sample_pose(tree: KinematicTree, rng_seed, action_category: str) -> np.ndarray:
    """Uniformly sample joint rotations within a category's ranges.

    ``rng_seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    ranges = category_ranges(tree, action_category)
    rng = np.random.default_rng(rng_seed)
    u = rng.random((tree.num_joints, 3))
    rot = ranges[..., 0] + u * (ranges[..., 1] - ranges[..., 0])
    return np.clip(rot, ranges[..., 0], ranges[..., 1])
