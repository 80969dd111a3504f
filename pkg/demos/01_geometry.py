"""Core geometry: clouds, rigid transforms, filters, augmentation.

Run: python3 demos/01_geometry.py
"""

import numpy as np

from featreg import PointCloud, RigidTransform, apply_rigid, augment, compose, crop_ball, voxel_downsample
from featreg.geom import AugmentParams, rotation_about_z

rng = np.random.default_rng(0)

# a noisy two-story "building corner" with a ground plane around it
ground = rng.uniform(-10, 10, size=(4000, 3))
ground[:, 2] = rng.normal(scale=0.02, size=4000)
wall_a = np.stack([np.zeros(1500), rng.uniform(0, 6, 1500), rng.uniform(0, 5, 1500)], axis=1)
wall_b = np.stack([rng.uniform(0, 6, 1500), np.zeros(1500), rng.uniform(0, 5, 1500)], axis=1)
cloud = PointCloud(np.concatenate([ground, wall_a, wall_b]), id="corner")
print(f"raw cloud: {len(cloud)} points")

# voxel filtering: one centroid per occupied 0.5 m cell
down = voxel_downsample(cloud, grid=0.5)
print(f"voxel downsampled at 0.5 m: {len(down)} points")

# ball crop around the corner itself
near = crop_ball(down, center=[0.0, 0.0, 1.0], radius=4.0)
print(f"within 4 m of the corner: {len(near)} points")

# rigid motion: rotate 30 degrees about z, then shift
move = RigidTransform(rotation_about_z(np.pi / 6), np.array([2.0, -1.0, 0.0]))
moved = apply_rigid(near, move)
back = apply_rigid(moved, move.inverse())
print(f"round-trip through a transform and its inverse: max error "
      f"{np.max(np.abs(back.points - near.points)):.2e} m")

# composition order: outer . inner applies inner first
lift = RigidTransform(np.eye(3), np.array([0.0, 0.0, 3.0]))
both = compose(lift, move)
print(f"composed translation: {np.round(both.translation, 3)}")

# training-time augmentation: jitter + shift + small tilt; z_rot=True would
# additionally spin the whole cloud by a uniform yaw (used in phase 2 of
# training to teach the orientation head)
params = AugmentParams(jitter_sigma=0.02, jitter_clip=0.06, shift_range=0.5,
                       small_rot_max=np.deg2rad(5), z_rot=False)
jittered, applied = augment(near, params, rng)
print(f"augmented copy differs by up to "
      f"{np.max(np.linalg.norm(jittered.points - near.points, axis=1)):.2f} m per point; "
      f"the applied transform is returned for bookkeeping "
      f"(shift {np.round(applied.translation, 2)})")
