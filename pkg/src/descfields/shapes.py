"""Procedural mug / bowl / bottle families with analytic SDF oracles.

Shapes are unions/differences of cylinders, spheres, cone frustums and a
torus handle, in a canonical frame: z up, base plane z = 0, symmetry axis
through the origin.  Every instance carries exact closed-form grasp and
place frames, so downstream success scoring never needs physics or meshes.

SDF convention: negative inside material, meters.  CSG min/max combinations
are exact outside and a bounded approximation (well under 2 mm for these
proportions) inside near blends.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import Aabb, PointCloud, SE3Pose

SHAPE_CLASSES = ("mug", "bowl", "bottle")

FRAME_KINDS = ("rim_grasp", "handle_grasp", "neck_grasp", "upright_place")

SCALE_RANGE = (0.8, 1.2)

# uniform sampling ranges for canonical dimensions, meters
PARAM_RANGES = {
    "mug": {
        "r_body": (0.042, 0.060),
        "h_body": (0.095, 0.135),
        "wall": (0.014, 0.020),
        "base": (0.015, 0.022),
    },
    "bowl": {
        "r_rim": (0.065, 0.090),
        "depth": (0.040, 0.060),
        "wall": (0.016, 0.024),
    },
    "bottle": {
        "r_body": (0.034, 0.046),
        "h_body": (0.110, 0.150),
        "shoulder": (0.016, 0.030),
        "r_neck": (0.014, 0.019),
        "h_neck": (0.035, 0.055),
        "neck_wall": (0.005, 0.008),
        "mouth": (0.016, 0.024),
    },
}

HANDLE_RANGES = {
    "major": (0.020, 0.030),
    "minor": (0.0085, 0.0125),
}


class ShapeError(ValueError):
    pass


class IncompatibleFrameError(ShapeError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    cls: str
    has_handle: bool
    params: dict

    def __post_init__(self):
        if self.cls not in SHAPE_CLASSES:
            raise ShapeError(f"unknown shape class {self.cls!r}")
        required = set(PARAM_RANGES[self.cls])
        if self.has_handle:
            required |= set(HANDLE_RANGES)
        missing = required - set(self.params)
        if missing:
            raise ShapeError(f"missing params {sorted(missing)}")
        for k, v in self.params.items():
            if not (v > 0):
                raise ShapeError(f"param {k} must be positive, got {v}")
        p = self.params
        if self.cls == "mug" and not p["wall"] < p["r_body"]:
            raise ShapeError("wall must be thinner than body radius")
        if self.cls == "bottle" and not p["neck_wall"] < p["r_neck"]:
            raise ShapeError("neck wall must be thinner than neck radius")
        if self.has_handle:
            wall = p.get("wall", np.inf)
            if not p["minor"] < wall and self.cls != "bottle":
                raise ShapeError("handle tube must not pierce the cavity wall")


@dataclass(frozen=True)
class ShapeInstance:
    spec: ShapeSpec
    world_pose: SE3Pose
    uniform_scale: float = 1.0

    def __post_init__(self):
        lo, hi = SCALE_RANGE
        if not (0.99 * lo <= self.uniform_scale <= 1.01 * hi):
            raise ShapeError(f"uniform_scale {self.uniform_scale} outside sampling range")

    def canonical(self) -> "ShapeInstance":
        return ShapeInstance(self.spec, SE3Pose.identity(), self.uniform_scale)


def sample_spec(cls: str, has_handle: bool, rng: np.random.Generator) -> ShapeSpec:
    """Draw canonical dimensions uniformly from the per-class ranges.

    Body parameters are drawn before handle parameters, so for a fixed seed
    the handled and handleless variants share the same body.
    """
    params = {k: float(rng.uniform(*bounds)) for k, bounds in PARAM_RANGES[cls].items()}
    if has_handle:
        for k, bounds in HANDLE_RANGES.items():
            params[k] = float(rng.uniform(*bounds))
        wall = params.get("wall")
        if wall is not None and params["minor"] >= wall:
            params["minor"] = 0.95 * wall
    return ShapeSpec(cls, has_handle, params)


# --- derived geometry ----------------------------------------------------


def _bowl_derived(p):
    """Sphere radii/center for the spherical-shell bowl."""
    r_rim, depth, wall = p["r_rim"], p["depth"], p["wall"]
    sink = 0.15 * wall
    ri = (r_rim * r_rim + depth * depth) / (2.0 * depth)
    ro = ri + wall
    zc = wall + ri - sink
    z_rim = wall + depth
    rim_outer = float(np.sqrt(max(ro * ro - (z_rim - zc) ** 2, 0.0)))
    return ri, ro, zc, z_rim, rim_outer


def _bottle_heights(p):
    z_shoulder = p["h_body"] + p["shoulder"]
    z_top = z_shoulder + p["h_neck"]
    return z_shoulder, z_top


def _handle_attach(spec: ShapeSpec):
    """Ring center (x < 0 side), in the canonical frame."""
    p = spec.params
    if spec.cls == "mug":
        return p["r_body"], 0.55 * p["h_body"]
    if spec.cls == "bowl":
        ri, ro, zc, z_rim, _ = _bowl_derived(p)
        zh = 0.55 * z_rim
        r_at = float(np.sqrt(max(ro * ro - (zh - zc) ** 2, 0.0)))
        return r_at, zh
    z_shoulder, _ = _bottle_heights(p)
    return p["r_body"], 0.55 * p["h_body"]


# --- SDF primitives (vectorized over (N,3)) ------------------------------


def _sd_cylinder(pts, r, z0, z1):
    dr = np.hypot(pts[:, 0], pts[:, 1]) - r
    dz = np.maximum(z0 - pts[:, 2], pts[:, 2] - z1)
    outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    return outside + inside


def _sd_sphere(pts, center, radius):
    return np.linalg.norm(pts - center, axis=1) - radius


def _sd_torus_y(pts, cx, cz, major, minor):
    """Torus with axis along y, ring in the x-z plane, centered at (cx, 0, cz)."""
    q1 = np.hypot(pts[:, 0] - cx, pts[:, 2] - cz) - major
    return np.hypot(q1, pts[:, 1]) - minor


def _sd_frustum(pts, r0, z0, r1, z1):
    """Capped cone between radius r0 at z0 and r1 at z1 (exact)."""
    h = 0.5 * (z1 - z0)
    zm = 0.5 * (z0 + z1)
    q = np.stack([np.hypot(pts[:, 0], pts[:, 1]), pts[:, 2] - zm], axis=1)
    k1 = np.array([r1, h])
    k2 = np.array([r1 - r0, 2.0 * h])
    rsel = np.where(q[:, 1] < 0.0, r0, r1)
    ca = np.stack([q[:, 0] - np.minimum(q[:, 0], rsel), np.abs(q[:, 1]) - h], axis=1)
    t = np.clip(((k1 - q) @ k2) / (k2 @ k2), 0.0, 1.0)
    cb = q - k1 + np.outer(t, k2)
    s = np.where((cb[:, 0] < 0.0) & (ca[:, 1] < 0.0), -1.0, 1.0)
    return s * np.sqrt(np.minimum((ca * ca).sum(axis=1), (cb * cb).sum(axis=1)))


def _handle_sdf(spec: ShapeSpec, pts):
    p = spec.params
    r_at, zh = _handle_attach(spec)
    d = _sd_torus_y(pts, -r_at, zh, p["major"], p["minor"])
    # keep the half of the ring outside the body: x <= -r_at + minor
    return np.maximum(d, pts[:, 0] - (-r_at + p["minor"]))


def _canonical_sdf(spec: ShapeSpec, pts) -> np.ndarray:
    p = spec.params
    if spec.cls == "mug":
        outer = _sd_cylinder(pts, p["r_body"], 0.0, p["h_body"])
        cavity = _sd_cylinder(pts, p["r_body"] - p["wall"], p["base"], p["h_body"] + 0.01)
        d = np.maximum(outer, -cavity)
    elif spec.cls == "bowl":
        ri, ro, zc, z_rim, _ = _bowl_derived(p)
        center = np.array([0.0, 0.0, zc])
        shell = np.maximum(_sd_sphere(pts, center, ro), -_sd_sphere(pts, center, ri))
        d = np.maximum(shell, np.maximum(pts[:, 2] - z_rim, -pts[:, 2]))
    else:
        z_shoulder, z_top = _bottle_heights(p)
        body = _sd_cylinder(pts, p["r_body"], 0.0, p["h_body"])
        shoulder = _sd_frustum(pts, p["r_body"], p["h_body"], p["r_neck"], z_shoulder)
        neck = _sd_cylinder(pts, p["r_neck"], z_shoulder, z_top)
        solid = np.minimum(np.minimum(body, shoulder), neck)
        mouth = _sd_cylinder(pts, p["r_neck"] - p["neck_wall"], z_top - p["mouth"], z_top + 0.01)
        d = np.maximum(solid, -mouth)
    if spec.has_handle:
        d = np.minimum(d, _handle_sdf(spec, pts))
    return d


def sdf(instance: ShapeInstance, pts) -> np.ndarray:
    """Signed distance at world points, meters; negative inside material."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    pose, s = instance.world_pose, instance.uniform_scale
    local = (pts - pose.translation) @ pose.rotation / s
    return s * _canonical_sdf(instance.spec, local)


def occupancy(instance: ShapeInstance, pts) -> np.ndarray:
    """1 where sdf < 0, else 0."""
    return (sdf(instance, pts) < 0.0).astype(np.uint8)


def canonical_aabb(spec: ShapeSpec) -> Aabb:
    p = spec.params
    if spec.cls == "mug":
        r, top = p["r_body"], p["h_body"]
    elif spec.cls == "bowl":
        _, _, _, z_rim, rim_outer = _bowl_derived(p)
        r, top = rim_outer, z_rim
    else:
        _, z_top = _bottle_heights(p)
        r, top = p["r_body"], z_top
    xlo = -r
    if spec.has_handle:
        r_at, _ = _handle_attach(spec)
        xlo = -(r_at + p["major"] + p["minor"])
    return Aabb(np.array([xlo, -r, 0.0]), np.array([r, r, top]))


def world_aabb(instance: ShapeInstance) -> Aabb:
    box = canonical_aabb(instance.spec)
    corners = np.array([[x, y, z] for x in (box.lo[0], box.hi[0])
                        for y in (box.lo[1], box.hi[1])
                        for z in (box.lo[2], box.hi[2])])
    moved = instance.world_pose.apply(corners * instance.uniform_scale)
    return Aabb.of_points(moved)


# --- surface sampling -----------------------------------------------------


def _part_samplers(spec: ShapeSpec):
    """(area, sampler) pairs; sampler(rng, n) -> (points, outward normals)."""
    p = spec.params
    parts = []

    def disc(z, r_in, r_out, nz):
        def f(rng, n):
            r = np.sqrt(rng.uniform(r_in**2, r_out**2, n))
            th = rng.uniform(0, 2 * np.pi, n)
            pts = np.stack([r * np.cos(th), r * np.sin(th), np.full(n, z)], axis=1)
            return pts, np.tile([0.0, 0.0, nz], (n, 1))
        return np.pi * (r_out**2 - r_in**2), f

    def cyl_side(r, z0, z1, sign):
        def f(rng, n):
            th = rng.uniform(0, 2 * np.pi, n)
            z = rng.uniform(z0, z1, n)
            pts = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
            nrm = np.stack([sign * np.cos(th), sign * np.sin(th), np.zeros(n)], axis=1)
            return pts, nrm
        return 2 * np.pi * r * (z1 - z0), f

    def sphere_band(center_z, radius, z0, z1, sign):
        def f(rng, n):
            z = rng.uniform(z0, z1, n)  # uniform z on a sphere = uniform area
            th = rng.uniform(0, 2 * np.pi, n)
            rho = np.sqrt(np.maximum(radius**2 - (z - center_z) ** 2, 0.0))
            pts = np.stack([rho * np.cos(th), rho * np.sin(th), z], axis=1)
            nrm = (pts - [0, 0, center_z]) / radius * sign
            return pts, nrm
        return 2 * np.pi * radius * (z1 - z0), f

    def frustum_side(r0, z0, r1, z1):
        slant = float(np.hypot(r1 - r0, z1 - z0))
        def f(rng, n):
            t = rng.uniform(0, 1, n)
            r = r0 + (r1 - r0) * t
            z = z0 + (z1 - z0) * t
            th = rng.uniform(0, 2 * np.pi, n)
            pts = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
            axial = (r0 - r1) / slant
            radial = (z1 - z0) / slant
            nrm = np.stack([radial * np.cos(th), radial * np.sin(th), np.full(n, axial)], axis=1)
            return pts, nrm
        return np.pi * (r0 + r1) * slant, f

    def handle_tube():
        r_at, zh = _handle_attach(spec)
        major, minor = p["major"], p["minor"]
        def f(rng, n):
            phi = rng.uniform(0, 2 * np.pi, n)   # ring angle, x-z plane
            psi = rng.uniform(0, 2 * np.pi, n)   # tube angle
            keep = rng.uniform(0, 1, n) < (major + minor * np.cos(psi)) / (major + minor)
            ring = np.stack([-r_at - major * np.cos(phi), np.zeros(n), zh + major * np.sin(phi)], axis=1)
            ring_out = np.stack([-np.cos(phi), np.zeros(n), np.sin(phi)], axis=1)
            nrm = ring_out * np.cos(psi)[:, None]
            nrm[:, 1] = np.sin(psi)
            pts = ring + minor * nrm
            return pts[keep], nrm[keep]
        return 4 * np.pi**2 * major * minor * 0.6, f

    if spec.cls == "mug":
        r, h, wall, base = p["r_body"], p["h_body"], p["wall"], p["base"]
        ri = r - wall
        parts += [cyl_side(r, 0, h, +1), cyl_side(ri, base, h, -1),
                  disc(h, ri, r, +1), disc(0, 0, r, -1), disc(base, 0, ri, +1)]
    elif spec.cls == "bowl":
        ri, ro, zc, z_rim, rim_outer = _bowl_derived(p)
        rim_inner = float(np.sqrt(max(ri**2 - (z_rim - zc) ** 2, 0.0)))
        parts += [sphere_band(zc, ro, 0.0, z_rim, +1),
                  sphere_band(zc, ri, zc - ri, z_rim, -1),
                  disc(z_rim, rim_inner, rim_outer, +1)]
        r_base = float(np.sqrt(max(ro**2 - zc**2, 0.0)))
        if r_base > 1e-6:
            parts += [disc(0.0, 0, r_base, -1)]
    else:
        z_shoulder, z_top = _bottle_heights(p)
        r, rn, nw, mouth = p["r_body"], p["r_neck"], p["neck_wall"], p["mouth"]
        rm = rn - nw
        parts += [cyl_side(r, 0, p["h_body"], +1),
                  frustum_side(r, p["h_body"], rn, z_shoulder),
                  cyl_side(rn, z_shoulder, z_top, +1),
                  disc(z_top, rm, rn, +1), disc(0, 0, r, -1),
                  cyl_side(rm, z_top - mouth, z_top, -1),
                  disc(z_top - mouth, 0, rm, +1)]
    if spec.has_handle:
        parts += [handle_tube()]
    return parts


SURFACE_TOL = 8e-4


def sample_surface(instance: ShapeInstance, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted surface samples with outward normals, in world frame.

    Candidate points come from the analytic part surfaces and are rejected
    against the full CSG so junction overlaps never leak through.
    """
    if n < 1:
        raise ShapeError("need n >= 1 surface samples")
    spec = instance.spec
    parts = _part_samplers(spec)
    areas = np.array([a for a, _ in parts])
    probs = areas / areas.sum()
    pts_acc, nrm_acc = [], []
    total = 0
    for _ in range(40):
        counts = rng.multinomial(max(n - total, 32), probs)
        for (area, sampler), c in zip(parts, counts):
            if c == 0:
                continue
            pts, nrm = sampler(rng, int(c * 1.5) + 4)
            if len(pts) == 0:
                continue
            d = _canonical_sdf(spec, pts)
            keep = np.abs(d) < SURFACE_TOL
            pts_acc.append(pts[keep])
            nrm_acc.append(nrm[keep])
        total = sum(len(a) for a in pts_acc)
        if total >= n:
            break
    if total < n:
        raise ShapeError(f"surface sampling starved: {total}/{n}")
    order = rng.permutation(total)[:n]
    pts = np.concatenate(pts_acc)[order]
    nrm = np.concatenate(nrm_acc)[order]
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    pose, s = instance.world_pose, instance.uniform_scale
    return PointCloud(pose.apply(pts * s), nrm @ pose.rotation.T)


def simulate_partial_view(cloud: PointCloud, camera_positions) -> PointCloud:
    """Keep points whose normal faces at least one camera."""
    if cloud.normals is None:
        raise ShapeError("partial-view culling needs normals")
    cams = np.atleast_2d(np.asarray(camera_positions, dtype=np.float64))
    if cams.shape[0] < 1:
        raise ShapeError("need at least one camera")
    visible = np.zeros(len(cloud), dtype=bool)
    for cam in cams:
        visible |= np.einsum("ij,ij->i", cloud.normals, cam - cloud.points) > 0.0
    if not visible.any():
        raise ShapeError("all points culled by partial-view simulation")
    return PointCloud(cloud.points[visible], cloud.normals[visible])


# --- ground-truth frames ---------------------------------------------------


def _frame_compatible(spec: ShapeSpec, kind: str) -> bool:
    if kind == "handle_grasp":
        return spec.has_handle
    if kind == "neck_grasp":
        return spec.cls == "bottle"
    if kind in ("rim_grasp", "upright_place"):
        return True
    raise ShapeError(f"unknown frame kind {kind!r}")


def rim_radius_height(spec: ShapeSpec) -> tuple[float, float]:
    """Opening rim circle (outer radius, height) in the canonical frame."""
    p = spec.params
    if spec.cls == "mug":
        return p["r_body"], p["h_body"]
    if spec.cls == "bowl":
        _, _, _, z_rim, rim_outer = _bowl_derived(p)
        return rim_outer, z_rim
    _, z_top = _bottle_heights(p)
    return p["r_neck"], z_top


def _canonical_frame(spec: ShapeSpec, kind: str, azimuth: float) -> SE3Pose:
    c, s = np.cos(azimuth), np.sin(azimuth)
    radial = np.array([c, s, 0.0])
    tangent = np.array([-s, c, 0.0])
    zhat = np.array([0.0, 0.0, 1.0])
    if kind == "rim_grasp":
        r, h = rim_radius_height(spec)
        rot = np.stack([radial, -tangent, -zhat], axis=1)
        return SE3Pose(rot, np.array([r * c, r * s, h]))
    if kind == "neck_grasp":
        p = spec.params
        z_shoulder, _ = _bottle_heights(p)
        t = np.array([0.0, 0.0, z_shoulder + 0.5 * p["h_neck"]])
        rot = np.stack([tangent, -zhat, -radial], axis=1)
        return SE3Pose(rot, t)
    if kind == "handle_grasp":
        p = spec.params
        r_at, zh = _handle_attach(spec)
        # handle lives on the -x side; grasp its outermost tube point
        t = np.array([-(r_at + p["major"]), 0.0, zh])
        rot = np.stack([np.array([0.0, 1.0, 0.0]), zhat, np.array([1.0, 0.0, 0.0])], axis=1)
        return SE3Pose(rot, t)
    return SE3Pose.identity()  # upright_place: base-center frame


def ground_truth_frame(instance: ShapeInstance, kind: str, azimuth: float = 0.0) -> SE3Pose:
    """Closed-form grasp/place frame in world coordinates.

    Covariant by construction: transforming the instance transforms the
    frame identically.  Grasp frames use z as the approach axis and x as the
    finger-closing direction.
    """
    if not _frame_compatible(instance.spec, kind):
        raise IncompatibleFrameError(f"{kind} incompatible with {instance.spec.cls}"
                                     f"{' (no handle)' if not instance.spec.has_handle else ''}")
    local = _canonical_frame(instance.spec, kind, azimuth)
    scaled = SE3Pose(local.rotation, local.translation * instance.uniform_scale)
    return geom.se3_compose(instance.world_pose, scaled)


# --- occupancy training samples -------------------------------------------


def occupancy_samples(instance: ShapeInstance, n: int, rng: np.random.Generator,
                      near_sigma: float = 0.008, far_sigma: float = 0.025):
    """(points, labels) mixing near-surface gaussians and uniform box samples."""
    n_near = int(0.45 * n)
    n_mid = int(0.25 * n)
    n_uni = n - n_near - n_mid
    surf = sample_surface(instance, max(n_near + n_mid, 64), rng)
    idx = rng.integers(0, len(surf), n_near + n_mid)
    base = surf.points[idx]
    sig = np.concatenate([np.full(n_near, near_sigma), np.full(n_mid, far_sigma)])
    near = base + rng.normal(size=(n_near + n_mid, 3)) * sig[:, None] * instance.uniform_scale
    box = world_aabb(instance).inflated(1.25)
    uni = box.sample(rng, n_uni)
    pts = np.concatenate([near, uni])
    return pts, occupancy(instance, pts)


# --- instance + dataset generation ----------------------------------------


WORKSPACE_XY = 0.15
ARBITRARY_Z = (0.05, 0.25)

DEFAULT_CAMERAS = np.array(
    [[0.45, 0.45, 0.55], [-0.45, 0.45, 0.55], [0.45, -0.45, 0.55], [-0.45, -0.45, 0.55]]
)


def sample_instance(cls: str, has_handle: bool, pose_mode: str, rng: np.random.Generator) -> ShapeInstance:
    """Random spec + world pose + uniform scale.

    pose_mode "upright": yaw-only rotation, base resting on z=0.
    pose_mode "arbitrary": rotation uniform on SO(3), translation in a box.
    """
    spec = sample_spec(cls, has_handle, rng)
    scale = float(rng.uniform(*SCALE_RANGE))
    xy = rng.uniform(-WORKSPACE_XY, WORKSPACE_XY, 2)
    if pose_mode == "upright":
        yaw = rng.uniform(0, 2 * np.pi)
        rot = geom.quat_to_matrix([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
        t = np.array([xy[0], xy[1], 0.0])
    elif pose_mode == "arbitrary":
        rot = geom.random_rotation(rng)
        t = np.array([xy[0], xy[1], rng.uniform(*ARBITRARY_Z)])
    else:
        raise ShapeError(f"unknown pose mode {pose_mode!r}")
    return ShapeInstance(spec, SE3Pose(rot, t), scale)


def observe(instance: ShapeInstance, rng: np.random.Generator, n_surface: int = 2048,
            cameras=DEFAULT_CAMERAS) -> PointCloud:
    """Partial-view cloud of an instance, as the cameras would fuse it."""
    full = sample_surface(instance, n_surface, rng)
    return simulate_partial_view(full, cameras)


# --- LOC1 occupancy-sample file format -------------------------------------
#
# magic "LOC1", u32-le count, then count * (3 f32-le coords + u8 label).

LOC1_MAGIC = b"LOC1"


def write_loc1(path, pts: np.ndarray, labels: np.ndarray) -> None:
    pts = np.asarray(pts, dtype="<f4")
    labels = np.asarray(labels, dtype=np.uint8)
    rec = np.zeros(len(pts), dtype=[("xyz", "<f4", 3), ("occ", "u1")])
    rec["xyz"] = pts
    rec["occ"] = labels
    with open(path, "wb") as f:
        f.write(LOC1_MAGIC)
        f.write(struct.pack("<I", len(pts)))
        f.write(rec.tobytes())


def read_loc1(path):
    with open(path, "rb") as f:
        if f.read(4) != LOC1_MAGIC:
            raise ShapeError("bad LOC1 magic")
        (count,) = struct.unpack("<I", f.read(4))
        rec = np.frombuffer(f.read(count * 13), dtype=[("xyz", "<f4", 3), ("occ", "u1")])
    return rec["xyz"].astype(np.float64), rec["occ"].copy()


@dataclass
class DatasetShape:
    shape_id: str
    instance: ShapeInstance
    cloud: PointCloud
    occ_points: np.ndarray
    occ_labels: np.ndarray


def _instance_record(shape_id, instance, cloud_file, occ_file):
    return {
        "id": shape_id,
        "class": instance.spec.cls,
        "has_handle": instance.spec.has_handle,
        "params": instance.spec.params,
        "pose": [float(v) for v in instance.world_pose.as_matrix().reshape(-1)],
        "scale": instance.uniform_scale,
        "cloud_file": cloud_file,
        "occ_file": occ_file,
    }


def instance_from_record(rec) -> ShapeInstance:
    spec = ShapeSpec(rec["class"], rec["has_handle"], dict(rec["params"]))
    pose = SE3Pose.from_matrix(np.array(rec["pose"]).reshape(4, 4))
    return ShapeInstance(spec, pose, rec["scale"])


def generate_dataset(out_dir, counts: dict, seed: int, pose_mode: str = "arbitrary",
                     n_surface: int = 2048, n_occ: int = 12000, cameras=DEFAULT_CAMERAS,
                     handle_fraction: float = 0.0) -> list:
    """Write manifest.json + per-shape LPC1/LOC1 files; returns the manifest.

    counts maps class name -> number of shapes.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = []
    for cls in sorted(counts):
        for i in range(counts[cls]):
            shape_id = f"{cls}_{i:04d}"
            has_handle = (cls == "mug") or (rng.uniform() < handle_fraction)
            inst = sample_instance(cls, has_handle, pose_mode, rng)
            cloud = observe(inst, rng, n_surface, cameras)
            pts, labels = occupancy_samples(inst, n_occ, rng)
            cloud_file, occ_file = f"{shape_id}.lpc1", f"{shape_id}.loc1"
            geom.write_lpc1(out / cloud_file, cloud)
            write_loc1(out / occ_file, pts, labels)
            manifest.append(_instance_record(shape_id, inst, cloud_file, occ_file))
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_dataset(data_dir) -> list[DatasetShape]:
    from pathlib import Path

    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    shapes = []
    for rec in manifest:
        inst = instance_from_record(rec)
        cloud = geom.read_lpc1(data_dir / rec["cloud_file"])
        pts, labels = read_loc1(data_dir / rec["occ_file"])
        shapes.append(DatasetShape(rec["id"], inst, cloud, pts, labels))
    return shapes
