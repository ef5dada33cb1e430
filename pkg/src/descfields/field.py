"""The locally conditioned descriptor field.

encode() turns a point cloud into a voxel grid of latents: per-point MLP
features (on cell-relative offsets) are scatter-meaned into the grid, a
presence channel is appended, and a stack of 3x3x3 convolutions propagates
local context.  Queries trilinearly interpolate the volume and feed the
local feature plus the cell-relative coordinate to an MLP decoder; the
descriptor is the final hidden activation vector (optionally all hidden
layers concatenated), and a linear head on the last hidden layer produces
the occupancy logit.

Everything geometric stays float64 until the network boundary; queries that
agree in f64 produce bitwise-identical descriptors, which is what makes the
translation equivariance of the whole construction exact rather than
approximate.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .geom import NormFrame, PointCloud, SE3Pose, normalize_cloud

LCK1_MAGIC = b"LCK1"


class FieldError(ValueError):
    pass


class OutOfCubeError(FieldError):
    """A query point left the normalized unit cube."""


@dataclass(frozen=True)
class FieldConfig:
    grid_resolution: int = 32
    point_feat_dim: int = 32
    volume_channels: int = 32
    conv_layers: int = 3
    decoder_hidden_width: int = 64
    decoder_hidden_layers: int = 4
    descriptor_source: str = "final_layer"  # or "all_layers"
    global_latent_ablation: bool = False
    voxel_lookup: str = "trilinear"  # "floor" reproduces the plain voxel lookup
    cube_size_m: float = 0.4
    clamp_fraction_limit: float = 0.05

    def __post_init__(self):
        if self.grid_resolution not in (32, 64, 128):
            raise FieldError("grid_resolution must be one of 32, 64, 128")
        for name in ("point_feat_dim", "volume_channels", "conv_layers",
                     "decoder_hidden_width", "decoder_hidden_layers"):
            if getattr(self, name) <= 0:
                raise FieldError(f"{name} must be positive")
        if self.descriptor_source not in ("final_layer", "all_layers"):
            raise FieldError("descriptor_source must be final_layer or all_layers")
        if self.voxel_lookup not in ("trilinear", "floor"):
            raise FieldError("voxel_lookup must be trilinear or floor")
        if self.cube_size_m <= 0:
            raise FieldError("cube_size_m must be positive")

    @property
    def descriptor_dim(self) -> int:
        if self.descriptor_source == "all_layers":
            return self.decoder_hidden_width * self.decoder_hidden_layers
        return self.decoder_hidden_width


@dataclass
class FieldWeights:
    config: FieldConfig
    params: dict[str, Tensor]

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def thaw(self) -> None:
        for p in self.params.values():
            p.requires_grad = True


@dataclass
class FeatureVolume:
    """Voxel grid of latents for one encoded cloud.

    `node` is the channels-last graph tensor gradients flow through; `grid`
    exposes the conventional [channels, R, R, R] layout as a detached copy.
    """

    node: Tensor
    norm_frame: NormFrame
    config: FieldConfig

    @property
    def grid(self) -> Tensor:
        return Tensor(np.ascontiguousarray(self.node.data.transpose(3, 0, 1, 2)))


def _he(rng, fan_in, shape):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_weights(config: FieldConfig, seed: int = 0) -> FieldWeights:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    pd, ch, width = config.point_feat_dim, config.volume_channels, config.decoder_hidden_width

    p["pm_w1"] = dm.parameter(_he(rng, 3, (3, pd)))
    p["pm_b1"] = dm.parameter(np.zeros(pd, np.float32))
    p["pm_w2"] = dm.parameter(_he(rng, pd, (pd, pd)))
    p["pm_b2"] = dm.parameter(np.zeros(pd, np.float32))

    cin = pd + 1  # presence channel
    for i in range(config.conv_layers):
        p[f"conv{i}_w"] = dm.parameter(_he(rng, 27 * cin, (27, cin, ch)))
        p[f"conv{i}_b"] = dm.parameter(np.zeros(ch, np.float32))
        cin = ch

    din = ch + 3
    for i in range(config.decoder_hidden_layers):
        p[f"dec{i}_w"] = dm.parameter(_he(rng, din, (din, width)))
        p[f"dec{i}_b"] = dm.parameter(np.zeros(width, np.float32))
        din = width
    p["occ_w"] = dm.parameter(_he(rng, width, (width, 1)))
    p["occ_b"] = dm.parameter(np.zeros(1, np.float32))
    return FieldWeights(config, p)


def _cube_to_grid(cube: np.ndarray, r: int) -> np.ndarray:
    """Unit-cube coords [-0.5, 0.5] to voxel-center coords [-0.5, r-0.5]."""
    return (cube + 0.5) * r - 0.5


def encode(weights: FieldWeights, cloud) -> FeatureVolume:
    """Encode a cloud (PointCloud or (N,3) world-frame array) into a volume.

    Points outside the unit cube after normalization are clamped and
    counted; more than clamp_fraction_limit of them is an error.
    """
    cfg = weights.config
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(np.asarray(cloud, dtype=np.float64))
    normed, frame = normalize_cloud(cloud, scale=1.0 / cfg.cube_size_m)
    cube = normed.points
    outside = np.any(np.abs(cube) > 0.5, axis=1)
    if outside.mean() > cfg.clamp_fraction_limit:
        raise FieldError(
            f"{outside.mean():.1%} of points fall outside the unit cube "
            f"(limit {cfg.clamp_fraction_limit:.0%}); cloud too large for cube_size_m"
        )
    cube = np.clip(cube, -0.5, 0.5)

    r = cfg.grid_resolution
    u = _cube_to_grid(cube, r)
    cells = np.clip(np.round(u), 0, r - 1).astype(np.int64)
    offs = u - cells
    lin = (cells[:, 0] * r + cells[:, 1]) * r + cells[:, 2]

    p = weights.params
    h = dm.relu(dm.linear(Tensor(offs.astype(np.float32)), p["pm_w1"], p["pm_b1"]))
    h = dm.linear(h, p["pm_w2"], p["pm_b2"])
    pooled, counts = dm.scatter_mean(h, lin, r**3)
    presence = Tensor((counts > 0).astype(np.float32).reshape(-1, 1))
    grid = dm.concat([pooled, presence], axis=1)
    grid = dm.reshape(grid, (r, r, r, cfg.point_feat_dim + 1))
    for i in range(cfg.conv_layers):
        grid = dm.conv3d(grid, p[f"conv{i}_w"], p[f"conv{i}_b"])
        if i + 1 < cfg.conv_layers:
            grid = dm.relu(grid)
    return FeatureVolume(grid, frame, cfg)


def _decode(weights: FieldWeights, feat: Tensor, coord_feat: Tensor):
    """Shared decoder MLP: returns (descriptor, occupancy logit) tensors."""
    cfg = weights.config
    p = weights.params
    h = dm.concat([feat, coord_feat], axis=1)
    acts = []
    for i in range(cfg.decoder_hidden_layers):
        h = dm.relu(dm.linear(h, p[f"dec{i}_w"], p[f"dec{i}_b"]))
        acts.append(h)
    desc = acts[-1] if cfg.descriptor_source == "final_layer" else dm.concat(acts, axis=1)
    logit = dm.linear(acts[-1], p["occ_w"], p["occ_b"])
    return desc, logit


def _pooled_feature(volume: FeatureVolume, n: int) -> Tensor:
    """Mean latent over the whole grid, tiled to n rows (global-latent mode)."""
    cfg = volume.config
    flat = dm.reshape(volume.node, (cfg.grid_resolution**3, cfg.volume_channels))
    pooled = dm.reshape(dm.mean_(flat, axis=0), (1, cfg.volume_channels))
    ones = Tensor(np.ones((n, 1), np.float32))
    return dm.matmul(ones, pooled)


def query_graph(weights: FieldWeights, volume: FeatureVolume, coords, tol: float = 1e-9):
    """Differentiable query returning (descriptor, occ logit) graph tensors.

    coords: (N,3) f64 array of world points (constants), or an f32 Tensor of
    unit-cube coordinates (the pose-optimizer path, already normalized).
    Constant world queries outside the cube raise OutOfCubeError.
    """
    cfg = weights.config
    r = cfg.grid_resolution
    if isinstance(coords, Tensor):
        cube_t = coords
        u_t = dm.add(dm.mul(cube_t, float(r)), (r - 1) / 2.0)
        cells = np.clip(np.round(u_t.data.astype(np.float64)), 0, r - 1)
        if cfg.global_latent_ablation:
            feat = _pooled_feature(volume, coords.data.shape[0])
            coord_feat = cube_t
        else:
            feat = dm.gather(volume.node, u_t, mode=cfg.voxel_lookup)
            coord_feat = dm.sub(u_t, Tensor(cells.astype(np.float32)))
        return _decode(weights, feat, coord_feat)

    pts = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    cube = volume.norm_frame.to_cube(pts)
    if np.any(np.abs(cube) > 0.5 + tol):
        worst = float(np.abs(cube).max())
        raise OutOfCubeError(f"query outside the normalized cube (|coord| up to {worst:.3f})")
    u = _cube_to_grid(cube, r)
    cells = np.clip(np.round(u), 0, r - 1)
    if cfg.global_latent_ablation:
        feat = _pooled_feature(volume, pts.shape[0])
        coord_feat = Tensor(cube.astype(np.float32))
    else:
        feat = dm.gather(volume.node, u, mode=cfg.voxel_lookup)
        coord_feat = Tensor((u - cells).astype(np.float32))
    return _decode(weights, feat, coord_feat)


def query_descriptor(weights: FieldWeights, volume: FeatureVolume, x) -> np.ndarray:
    """Descriptor value(s) at world point(s) x; (d,) for a single point."""
    single = np.asarray(x).ndim == 1
    desc, _ = query_graph(weights, volume, x)
    return desc.data[0] if single else desc.data


def query_occupancy_logit(weights: FieldWeights, volume: FeatureVolume, x):
    """Occupancy logit(s) at world point(s) x; sigmoid gives probability."""
    single = np.asarray(x).ndim == 1
    _, logit = query_graph(weights, volume, x)
    return float(logit.data[0, 0]) if single else logit.data[:, 0]


def pose_descriptor(weights: FieldWeights, volume: FeatureVolume, pose: SE3Pose,
                    query_points: np.ndarray) -> np.ndarray:
    """Concatenated descriptors of the transformed query set, flattened.

    query_points: (Nq,3) rigid set in the tool frame, meters.  Any
    transformed point outside the cube raises OutOfCubeError (the pose
    optimizer treats that candidate as infeasible).
    """
    world = pose.apply(np.asarray(query_points, dtype=np.float64))
    desc, _ = query_graph(weights, volume, world)
    return desc.data.reshape(-1)


# --- LCK1 checkpoint format --------------------------------------------------


def save_checkpoint(path, weights: FieldWeights) -> None:
    """magic, u32 header length, JSON header, then raw f32 blobs."""
    names = sorted(weights.params)
    manifest = []
    offset = 0
    for name in names:
        arr = weights.params[name].data
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps({"config": asdict(weights.config), "params": manifest}).encode()
    with open(path, "wb") as f:
        f.write(LCK1_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for name in names:
            f.write(weights.params[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> FieldWeights:
    with open(path, "rb") as f:
        if f.read(4) != LCK1_MAGIC:
            raise FieldError("bad LCK1 magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        blob = f.read()
    config = FieldConfig(**header["config"])
    params = {}
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[rec["offset"]:rec["offset"] + size], dtype="<f4")
        params[rec["name"]] = dm.parameter(arr.reshape(shape).copy())
    return FieldWeights(config, params)


def checkpoint_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def weights_fingerprint(weights: FieldWeights) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(weights.config), sort_keys=True).encode())
    for name in sorted(weights.params):
        h.update(name.encode())
        h.update(weights.params[name].data.tobytes())
    return h.hexdigest()
