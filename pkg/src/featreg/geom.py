"""Point-cloud primitives: containers, rigid transforms, filters, augmentation.

Conventions: points are float64 arrays of shape (N, 3) in meters, z up.
Rotations are 3x3 matrices acting on column vectors, x' = R @ x + t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# Orthonormality slack accepted when validating rotation matrices.
ROTATION_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, copy=True)
    if pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected points of shape (N, 3), got {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D point set with optional per-point intensity.

    Arrays are copied on construction and frozen; a PointCloud is a value.
    """

    points: np.ndarray
    intensity: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64, copy=True)
            if inten.shape != (len(pts),):
                raise InvalidInputError(
                    f"intensity shape {inten.shape} does not match {len(pts)} points"
                )
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: x' = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64, copy=True)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(-1)
        if rot.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError("rigid transform needs a 3x3 rotation and 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(t))):
            raise InvalidInputError("rigid transform entries must be finite")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise InvalidInputError(f"rotation not orthonormal (|R'R - I| = {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ROTATION_TOL:
            raise InvalidInputError(f"rotation determinant {det!r}, expected +1")
        rot.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Composition outer . inner: apply inner first, then outer."""
    return RigidTransform(
        outer.rotation @ inner.rotation,
        outer.rotation @ inner.translation + outer.translation,
    )


def apply_rigid(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Transform every point, preserving order and intensity."""
    pts = cloud.points @ transform.rotation.T + transform.translation
    return PointCloud(pts, cloud.intensity, id=cloud.id)


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate raw (N, 3) coordinates by angle (radians) about the +z axis."""
    pts = np.asarray(points, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty_like(pts)
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1]
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1]
    out[..., 2] = pts[..., 2]
    return out


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def voxel_downsample(cloud: PointCloud, grid: float) -> PointCloud:
    """Replace each occupied voxel by the centroid of its points.

    Voxel index of a point is floor(p / grid) per component. Output points are
    ordered by ascending lexicographic voxel index. Intensity, when present,
    is averaged per voxel.
    """
    if not (grid > 0):
        raise InvalidInputError(f"grid must be positive, got {grid!r}")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(np.empty((0, 3)), None, id=cloud.id)
    vox = np.floor(pts / grid).astype(np.int64)
    keys, inverse = np.unique(vox, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(keys)).astype(np.float64)
    cent = np.stack(
        [np.bincount(inverse, weights=pts[:, k], minlength=len(keys)) for k in range(3)],
        axis=1,
    )
    cent /= counts[:, None]
    inten = None
    if cloud.intensity is not None:
        inten = np.bincount(inverse, weights=cloud.intensity, minlength=len(keys)) / counts
    return PointCloud(cent, inten, id=cloud.id)


def crop_ball(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Keep points with ||p - center|| <= radius (inclusive), preserving order."""
    if not (radius > 0):
        raise InvalidInputError(f"radius must be positive, got {radius!r}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center)):
        raise InvalidInputError("center must be finite")
    mask = np.linalg.norm(cloud.points - center, axis=1) <= radius
    inten = cloud.intensity[mask] if cloud.intensity is not None else None
    return PointCloud(cloud.points[mask], inten, id=cloud.id)


def centroid_distance(a: PointCloud, b: PointCloud) -> float:
    """Euclidean distance between the centroids of two non-empty clouds."""
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("centroid_distance requires non-empty clouds")
    return float(np.linalg.norm(a.points.mean(axis=0) - b.points.mean(axis=0)))


def random_point_dropout(
    cloud: PointCloud, n: int, rng: np.random.Generator
) -> PointCloud:
    """Uniform random subset of size n (original order kept); no-op when N <= n."""
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if len(cloud) <= n:
        return cloud
    keep = np.sort(rng.choice(len(cloud), size=n, replace=False))
    inten = cloud.intensity[keep] if cloud.intensity is not None else None
    return PointCloud(cloud.points[keep], inten, id=cloud.id)


@dataclass(frozen=True)
class AugmentParams:
    """Training-time perturbation settings.

    jitter_sigma/jitter_clip: per-coordinate Gaussian noise stddev and hard bound.
    shift_range: uniform translation bound per axis.
    small_rot_max: max angle (radians) of a random-axis rotation.
    z_rot: whether to add a full uniform rotation about z.
    """

    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    shift_range: float = 2.0
    small_rot_max: float = float(np.deg2rad(2.0))
    z_rot: bool = False

    def __post_init__(self):
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise InvalidInputError("jitter parameters must be non-negative")
        if self.jitter_clip < self.jitter_sigma:
            raise InvalidInputError("jitter_clip must be >= jitter_sigma")
        if self.shift_range < 0 or self.small_rot_max < 0:
            raise InvalidInputError("shift_range and small_rot_max must be non-negative")


def _axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = axis / norm
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def augment(
    cloud: PointCloud, params: AugmentParams, rng: np.random.Generator
) -> tuple[PointCloud, RigidTransform]:
    """Jitter then rigidly perturb a cloud; returns (new cloud, applied transform).

    Draw order is fixed (jitter, yaw, axis, angle, shift) so a given rng state
    yields the same augmentation regardless of which parameters are zero.
    With all parameters zero the cloud comes back unchanged.
    """
    pts = cloud.points
    # scale 0 yields exact zeros while still consuming the same rng draws
    jitter = rng.normal(0.0, params.jitter_sigma, size=pts.shape)
    np.clip(jitter, -params.jitter_clip, params.jitter_clip, out=jitter)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, params.small_rot_max)
    shift = rng.uniform(-params.shift_range, params.shift_range, size=3)
    if not params.z_rot:
        yaw = 0.0
    rot = rotation_about_z(yaw) @ _axis_angle_rotation(axis, angle)
    transform = RigidTransform(rot, shift)
    jittered = PointCloud(pts + jitter, cloud.intensity, id=cloud.id)
    return apply_rigid(jittered, transform), transform
