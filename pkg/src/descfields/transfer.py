"""Few-shot demonstration encoding and transfer.

A demonstration is (partial cloud, pick pose, place pose).  Pick poses are
gripper frames in world coordinates; place poses are stored relative to a
fixture (shelf) frame fixed in world coordinates.  Each demo's pose
descriptors are computed against its own encoded volume and averaged over
the K demos into a single pick and place target; test-time transfer runs
the multi-start pose optimizer against those targets on the new cloud.

The place target encodes the pose of a "virtual fixture": the world pose
the fixture frame would have if the observed object were already placed.
For our analytic shapes that is exactly the instance's upright_place frame,
so recovering it on a test object tells us how to move the object onto the
real fixture.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import geom, shapes
from .field import FeatureVolume, FieldWeights, encode, pose_descriptor
from .geom import Aabb, PointCloud, SE3Pose, se3_compose
from .pose import PoseSolveConfig, PoseSolveResult, QueryPointSet, optimize_pose

LDB1_MAGIC = b"LDB1"

# world pose of the placement fixture surface frame (shelf center)
DEFAULT_FIXTURE = SE3Pose(np.eye(3), np.array([0.45, 0.0, 0.12]))

TASKS = {
    "rim_pick_place": {"grasp": "rim_grasp"},
    "handle_pick_place": {"grasp": "handle_grasp"},
    "neck_pick_place": {"grasp": "neck_grasp"},
}


class TransferError(ValueError):
    pass


@dataclass
class Demonstration:
    cloud: PointCloud
    pick_pose: SE3Pose
    place_pose: SE3Pose  # fixture-relative
    shape_id: str
    metadata: dict = dc_field(default_factory=dict)


@dataclass
class DemoDescriptorBundle:
    z_pick_mean: np.ndarray
    z_place_mean: np.ndarray
    query_pick: QueryPointSet
    query_place: QueryPointSet
    demo_count: int
    checkpoint_fingerprint: str

    def __post_init__(self):
        if self.demo_count < 1:
            raise TransferError("bundle needs at least one demonstration")


@dataclass
class TransferResult:
    pick: PoseSolveResult | None
    place: PoseSolveResult | None
    timing: dict


def record_demo(instance: shapes.ShapeInstance, task: str,
                rng: np.random.Generator, cameras=shapes.DEFAULT_CAMERAS,
                n_surface: int = 2048, fixture: SE3Pose = DEFAULT_FIXTURE) -> Demonstration:
    """Synthesize a demonstration from the analytic ground-truth frames."""
    if task not in TASKS:
        raise TransferError(f"unknown task {task!r}")
    grasp_kind = TASKS[task]["grasp"]
    if not shapes._frame_compatible(instance.spec, grasp_kind):
        raise TransferError(f"task {task} incompatible with {instance.spec.cls}")
    cloud = shapes.observe(instance, rng, n_surface=n_surface, cameras=cameras)
    pick = shapes.ground_truth_frame(instance, grasp_kind)
    # virtual-fixture pose: where the fixture frame sits relative to the
    # observed object, i.e. the object's own place frame in world coords
    virtual = shapes.ground_truth_frame(instance, "upright_place")
    place_rel = se3_compose(fixture.inverse(), virtual)
    return Demonstration(cloud, pick, place_rel, shape_id=f"{instance.spec.cls}_demo",
                         metadata={"task": task})


def encode_demo_bundle(weights: FieldWeights, demos: list[Demonstration],
                       query_pick: QueryPointSet, query_place: QueryPointSet,
                       fingerprint: str = "", fixture: SE3Pose = DEFAULT_FIXTURE) -> DemoDescriptorBundle:
    """Average each demo's pose descriptors into single pick/place targets."""
    if not demos:
        raise TransferError("no demonstrations given")
    picks, places = [], []
    for i, demo in enumerate(demos):
        vol = encode(weights, demo.cloud)
        try:
            picks.append(pose_descriptor(weights, vol, demo.pick_pose, query_pick.points))
            virtual = se3_compose(fixture, demo.place_pose)
            places.append(pose_descriptor(weights, vol, virtual, query_place.points))
        except Exception as e:
            raise TransferError(f"demo {i} ({demo.shape_id}) not encodable: {e}") from e
    return DemoDescriptorBundle(
        z_pick_mean=np.mean(picks, axis=0),
        z_place_mean=np.mean(places, axis=0),
        query_pick=query_pick,
        query_place=query_place,
        demo_count=len(demos),
        checkpoint_fingerprint=fingerprint,
    )


def transfer(weights: FieldWeights, bundle: DemoDescriptorBundle,
             test_cloud: PointCloud, solve_cfg: PoseSolveConfig,
             rng: np.random.Generator, fingerprint: str = "",
             tasks=("pick", "place")) -> TransferResult:
    """Recover pick and/or place poses on a new cloud via energy descent."""
    if bundle.checkpoint_fingerprint and fingerprint and \
            bundle.checkpoint_fingerprint != fingerprint:
        raise TransferError("bundle was built with a different checkpoint")
    volume = encode(weights, test_cloud)
    bounds = Aabb.of_points(test_cloud.points)
    results = {}
    timing = {}
    for name in tasks:
        qs = bundle.query_pick if name == "pick" else bundle.query_place
        target = bundle.z_pick_mean if name == "pick" else bundle.z_place_mean
        t0 = time.monotonic()
        results[name] = optimize_pose(weights, volume, qs, target, solve_cfg, rng, bounds)
        timing[name] = time.monotonic() - t0
    return TransferResult(results.get("pick"), results.get("place"), timing)


# --- demo + bundle file formats ----------------------------------------------


def save_demo(path, demo: Demonstration, cloud_file: str) -> None:
    """JSON record next to an LPC1 cloud file."""
    rec = {
        "shape_id": demo.shape_id,
        "task": demo.metadata.get("task", ""),
        "cloud_file": cloud_file,
        "pick_pose": [float(v) for v in demo.pick_pose.as_matrix().reshape(-1)],
        "place_pose": [float(v) for v in demo.place_pose.as_matrix().reshape(-1)],
    }
    with open(path, "w") as f:
        json.dump(rec, f, indent=1)


def load_demo(path) -> Demonstration:
    path = Path(path)
    with open(path) as f:
        rec = json.load(f)
    cloud = geom.read_lpc1(path.parent / rec["cloud_file"])
    return Demonstration(
        cloud=cloud,
        pick_pose=SE3Pose.from_matrix(np.array(rec["pick_pose"]).reshape(4, 4)),
        place_pose=SE3Pose.from_matrix(np.array(rec["place_pose"]).reshape(4, 4)),
        shape_id=rec["shape_id"],
        metadata={"task": rec.get("task", "")},
    )


def save_bundle(path, bundle: DemoDescriptorBundle) -> None:
    """LDB1: magic, u32 header length, JSON header, two f32 blobs."""
    header = json.dumps({
        "K": bundle.demo_count,
        "dims": [len(bundle.z_pick_mean), len(bundle.z_place_mean)],
        "checkpoint_sha256": bundle.checkpoint_fingerprint,
        "query_pick": {
            "kind": bundle.query_pick.kind,
            "extent": bundle.query_pick.extent.tolist(),
            "points": bundle.query_pick.points.reshape(-1).tolist(),
        },
        "query_place": {
            "kind": bundle.query_place.kind,
            "extent": bundle.query_place.extent.tolist(),
            "points": bundle.query_place.points.reshape(-1).tolist(),
        },
    }).encode()
    with open(path, "wb") as f:
        f.write(LDB1_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.asarray(bundle.z_pick_mean, "<f4").tobytes())
        f.write(np.asarray(bundle.z_place_mean, "<f4").tobytes())


def load_bundle(path) -> DemoDescriptorBundle:
    with open(path, "rb") as f:
        if f.read(4) != LDB1_MAGIC:
            raise TransferError("bad LDB1 magic")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        d_pick, d_place = header["dims"]
        z_pick = np.frombuffer(f.read(d_pick * 4), dtype="<f4").copy()
        z_place = np.frombuffer(f.read(d_place * 4), dtype="<f4").copy()

    def qs(rec):
        pts = np.array(rec["points"]).reshape(-1, 3)
        return QueryPointSet(pts, rec["kind"], np.array(rec["extent"]))

    return DemoDescriptorBundle(
        z_pick_mean=z_pick,
        z_place_mean=z_place,
        query_pick=qs(header["query_pick"]),
        query_place=qs(header["query_place"]),
        demo_count=header["K"],
        checkpoint_fingerprint=header["checkpoint_sha256"],
    )
