"""
The camera rig and the skeleton
===============================

Two fish-eye cameras hang 20 mm apart under the brim of a head-mounted
device and look straight down.  This demo projects a sampled body pose into
both views, counts how many cameras see each joint and checks that forward
kinematics never stretches a bone.
"""
import numpy as np

from egopose import default_rig, default_tree, forward_kinematics, project_points, sample_pose
from egopose.camera import visibility_count
from egopose.skeleton import ACTION_CATEGORIES

rig = default_rig()
tree = default_tree()
for k, cam in enumerate(rig):
    print(f"camera {k}: {cam.width}x{cam.height} px, focal {cam.focal:.2f} px/rad, "
          f"fov half-angle {np.degrees(cam.theta_max):.1f} deg")

###############################################################################
# A point on the optical axis lands on the image centre; the radius grows
# linearly with the angle off the axis.

below = rig[0].center + np.array([0.0, 0.0, -1000.0])
u, v, visible = project_points(rig[0], below[None])
print(f"on-axis point -> ({u[0]:.3f}, {v[0]:.3f}), principal point {rig[0].principal_point}")

###############################################################################
# Sample one pose per action category and report joint visibility.

for i, action in enumerate(sorted(ACTION_CATEGORIES)):
    pose = forward_kinematics(tree, sample_pose(tree, i, action))
    counts = visibility_count(pose, rig)
    print(f"{action:>7}: joints seen by 0/1/2 cameras = {np.bincount(counts, minlength=3)}")

###############################################################################
# Forward kinematics only rotates bones, so their lengths match the rest pose.

rng = np.random.default_rng(0)
rest = tree.rest_pose()
worst = 0.0
for _ in range(200):
    pose = forward_kinematics(tree, sample_pose(tree, int(rng.integers(1 << 31)), "walk"))
    for j, parent in enumerate(tree.parents):
        if parent >= 0:
            a = np.linalg.norm(pose[j] - pose[parent])
            b = np.linalg.norm(rest[j] - rest[parent])
            worst = max(worst, abs(a - b) / b)
print(f"largest relative bone-length change over 200 poses: {worst:.2e}")
