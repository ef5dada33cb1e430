"""Rigid-body math, point clouds, bounding boxes, and cloud normalization.

All geometry is carried in float64; conversion to float32 happens only at
the network boundary.  Rotations are stored as 3x3 matrices; quaternions
are used for sampling and for the pose-optimizer parametrization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6
NORMAL_TOL = 1e-4


class GeometryError(ValueError):
    pass


class DegenerateCloudError(GeometryError):
    pass


def vec3(x, y=None, z=None) -> np.ndarray:
    """Build a finite (3,) float64 vector from components or an array-like."""
    v = np.asarray(x, dtype=np.float64) if y is None else np.array([x, y, z], dtype=np.float64)
    if v.shape != (3,):
        raise GeometryError(f"expected 3 components, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite vector component")
    return v


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = vec3(self.translation)
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise GeometryError("non-finite rotation entry")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation determinant != +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return SE3Pose(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "SE3Pose":
        rt = self.rotation.T
        return SE3Pose(rt, -rt @ self.translation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an (N,3) or (3,) array of points."""
        p = np.asarray(pts, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointCloud:
    """N >= 1 points with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise GeometryError(f"points must be (N>=1, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise GeometryError("non-finite point")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64)
            if n.shape != p.shape:
                raise GeometryError("normals shape must match points")
            norms = np.linalg.norm(n, axis=1)
            if np.abs(norms - 1.0).max() > NORMAL_TOL:
                raise GeometryError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = vec3(self.lo), vec3(self.hi)
        if np.any(lo > hi):
            raise GeometryError("Aabb lo must be <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @staticmethod
    def of_points(pts: np.ndarray) -> "Aabb":
        p = np.asarray(pts, dtype=np.float64)
        return Aabb(p.min(axis=0), p.max(axis=0))

    def inflated(self, factor: float) -> "Aabb":
        c = 0.5 * (self.lo + self.hi)
        h = 0.5 * (self.hi - self.lo) * factor
        return Aabb(c - h, c + h)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, 3))


@dataclass(frozen=True)
class NormFrame:
    """Maps world coords to the unit-cube frame: x_cube = (x - centroid_shift) * scale.

    The scale is a global constant shared by every cloud (1 / cube edge in
    meters) so metric structure is preserved; only the centroid shift is
    per-cloud.
    """

    centroid_shift: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "centroid_shift", vec3(self.centroid_shift))
        if not (self.scale > 0):
            raise GeometryError("scale must be positive")

    def to_cube(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.centroid_shift) * self.scale

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.centroid_shift


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Composition: result applies b first, then a."""
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_apply(pose: SE3Pose, cloud: PointCloud) -> PointCloud:
    """Transform a cloud; normals are rotated only."""
    pts = pose.apply(cloud.points)
    normals = None if cloud.normals is None else cloud.normals @ pose.rotation.T
    return PointCloud(pts, normals)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix. Normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise GeometryError("zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix uniform on SO(3), via a uniform unit quaternion."""
    q = rng.normal(size=4)
    return quat_to_matrix(q)


def random_se3(rng: np.random.Generator, translation_bounds: Aabb) -> SE3Pose:
    """Uniform rotation, translation uniform inside the given box."""
    r = random_rotation(rng)
    t = rng.uniform(translation_bounds.lo, translation_bounds.hi)
    return SE3Pose(r, t)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = np.clip((np.trace(np.asarray(r, dtype=np.float64)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def normalize_cloud(cloud: PointCloud, scale: float) -> tuple[PointCloud, NormFrame]:
    """Shift the centroid to the origin and apply the fixed global scale.

    Rejects degenerate clouds (all points identical) since they carry no
    shape information and would defeat the downstream encoder.
    """
    pts = cloud.points
    if len(cloud) > 1:
        spread = pts.max(axis=0) - pts.min(axis=0)
        if float(np.max(spread)) < 1e-12:
            raise DegenerateCloudError("all points identical; cannot normalize")
    centroid = pts.mean(axis=0)
    frame = NormFrame(centroid, scale)
    return PointCloud(frame.to_cube(pts), cloud.normals), frame


def denormalize_cloud(cloud: PointCloud, frame: NormFrame) -> PointCloud:
    return PointCloud(frame.to_world(cloud.points), cloud.normals)


def normalize_pose(pose: SE3Pose, frame: NormFrame) -> SE3Pose:
    """Re-express a world-frame pose in normalized coordinates.

    The pose origin maps like a point; the orientation is unchanged (the
    normalization is a similarity with isotropic scale, so frame axes keep
    their directions).
    """
    return SE3Pose(pose.rotation, frame.to_cube(pose.translation))


def denormalize_pose(pose: SE3Pose, frame: NormFrame) -> SE3Pose:
    """Inverse of normalize_pose: re-express a normalized pose in world coords."""
    return SE3Pose(pose.rotation, frame.to_world(pose.translation))


# --- LPC1 point-cloud binary format -------------------------------------
#
# magic "LPC1", u32-le point count N, u8 has_normals flag,
# N*3 f32-le points, then (if flagged) N*3 f32-le normals.

LPC1_MAGIC = b"LPC1"


def write_lpc1(path, cloud: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(LPC1_MAGIC)
        f.write(struct.pack("<IB", len(cloud), 1 if cloud.normals is not None else 0))
        f.write(cloud.points.astype("<f4").tobytes())
        if cloud.normals is not None:
            f.write(cloud.normals.astype("<f4").tobytes())


def read_lpc1(path) -> PointCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != LPC1_MAGIC:
            raise GeometryError(f"bad LPC1 magic {magic!r}")
        n, has_normals = struct.unpack("<IB", f.read(5))
        pts = np.frombuffer(f.read(n * 12), dtype="<f4").reshape(n, 3).astype(np.float64)
        normals = None
        if has_normals:
            normals = np.frombuffer(f.read(n * 12), dtype="<f4").reshape(n, 3).astype(np.float64)
            # re-unitize: f32 storage may drift just past the tolerance
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)
