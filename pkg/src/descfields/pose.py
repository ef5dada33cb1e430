"""Pose recovery: multi-start gradient descent on descriptor-space energy,
query-point generation, and the ICP+RANSAC geometric baseline.

The energy of a candidate pose is the distance between the pose descriptor
of the transformed query set and a target descriptor (L1 by default).  A
descriptor field only carries local information, so descent is started from
many random rotations and translations inside the observed cloud's box and
the lowest-energy feasible candidate wins.  All starts are stepped in
lockstep as one batched graph; start i of an n-start run is identical to
start i of any larger run with the same seed (common random numbers), which
makes success monotone comparisons across n_starts meaningful.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import diffmath as dm
from .diffmath import AdamState, Tape, Tensor, adam_step, zero_grads
from .field import FeatureVolume, FieldWeights, OutOfCubeError, pose_descriptor, query_graph
from .geom import Aabb, PointCloud, SE3Pose, denormalize_pose, quat_to_matrix

QUERY_KINDS = ("gripper_contact", "peg_contact", "surface_volume")

DEFAULT_EXTENTS = {
    "gripper_contact": np.array([0.02, 0.01, 0.03]),
    "peg_contact": np.array([0.015, 0.015, 0.04]),
    "surface_volume": np.array([0.08, 0.08, 0.06]),
}


class PoseError(ValueError):
    pass


@dataclass(frozen=True)
class QueryPointSet:
    """Rigid set of >= 3 non-collinear points in the tool frame."""

    points: np.ndarray
    kind: str
    extent: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        ext = np.asarray(self.extent, dtype=np.float64)
        if self.kind not in QUERY_KINDS:
            raise PoseError(f"unknown query kind {self.kind!r}")
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
            raise PoseError("need at least 3 query points")
        if np.any(np.abs(pts) > ext + 1e-12):
            raise PoseError("query points must lie inside the declared box")
        centered = pts - pts.mean(axis=0)
        svals = np.linalg.svd(centered, compute_uv=False)
        if svals[1] < 1e-9:
            raise PoseError("query points are collinear")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "extent", ext)


@dataclass(frozen=True)
class PoseSolveConfig:
    n_starts: int = 20
    steps_per_start: int = 300
    lr: float = 1e-2
    energy_norm: str = "L1"
    out_of_cube_penalty: float = 30.0
    cube_margin: float = 0.02

    def __post_init__(self):
        if self.n_starts < 1:
            raise PoseError("n_starts must be >= 1")
        if self.energy_norm not in ("L1", "L2"):
            raise PoseError("energy_norm must be L1 or L2")


@dataclass
class CandidateTrace:
    init_pose: SE3Pose
    final_pose: SE3Pose
    final_energy: float
    feasible: bool
    energies: np.ndarray  # per-step values, penalty excluded


@dataclass
class PoseSolveResult:
    best_pose: SE3Pose | None
    best_energy: float
    candidates: list[CandidateTrace]
    success: bool

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["candidate", "step", "energy"])
            for ci, cand in enumerate(self.candidates):
                for si, e in enumerate(cand.energies):
                    w.writerow([ci, si, f"{e:.6f}"])


def generate_query_points(kind: str, extent=None, density: int = 10,
                          rng: np.random.Generator | None = None) -> QueryPointSet:
    """Uniform samples in a tool-frame box; four deterministic anchor points
    guarantee non-collinearity regardless of the draw."""
    if density < 3:
        raise PoseError("need at least 3 query points")
    rng = rng or np.random.default_rng(0)
    ext = np.asarray(extent if extent is not None else DEFAULT_EXTENTS[kind], dtype=np.float64)
    if np.any(ext <= 0):
        raise PoseError("extent must be positive")
    anchors = np.array([
        [0.0, 0.0, 0.0],
        [0.8, 0.0, 0.0],
        [0.0, 0.8, 0.0],
        [0.0, 0.0, 0.8],
    ]) * ext
    n_rand = max(density - len(anchors), 0)
    pts = rng.uniform(-ext, ext, size=(n_rand, 3))
    pts = np.concatenate([anchors, pts])[:max(density, 4)]
    return QueryPointSet(pts, kind, ext)


def energy(weights: FieldWeights, volume: FeatureVolume, pose: SE3Pose,
           query_set: QueryPointSet, target: np.ndarray, norm: str = "L1") -> float:
    """Descriptor-space distance of a pose from the target; +inf if any
    transformed query point leaves the cube."""
    try:
        desc = pose_descriptor(weights, volume, pose, query_set.points)
    except OutOfCubeError:
        return float("inf")
    resid = desc.astype(np.float64) - np.asarray(target, np.float64)
    if norm == "L1":
        return float(np.abs(resid).sum())
    return float(np.sqrt((resid**2).sum()))


def _draw_starts(rng: np.random.Generator, n: int, bounds: Aabb):
    """Per-start interleaved draws so start i is identical for every n >= i."""
    quats = np.empty((n, 4))
    trans = np.empty((n, 3))
    for i in range(n):
        quats[i] = rng.normal(size=4)
        trans[i] = rng.uniform(bounds.lo, bounds.hi)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return quats, trans


def optimize_pose(weights: FieldWeights, volume: FeatureVolume,
                  query_set: QueryPointSet, target: np.ndarray,
                  cfg: PoseSolveConfig, rng: np.random.Generator,
                  translation_bounds: Aabb) -> PoseSolveResult:
    """Multi-start Adam descent over (quaternion, translation).

    Rotations start uniform on SO(3); translations start uniform inside the
    observed cloud's bounding box.  Candidates whose query points leave the
    cube feel a smooth hinge penalty during descent and are flagged
    infeasible at selection time.  Poses are optimized in the normalized
    frame and returned denormalized to world coordinates.
    """
    frame = volume.norm_frame
    n = cfg.n_starts
    nq = query_set.points.shape[0]
    d = weights.config.descriptor_dim
    target = np.asarray(target, np.float32).reshape(1, nq * d)

    quats, trans_w = _draw_starts(rng, n, translation_bounds)
    init_poses = [SE3Pose(quat_to_matrix(quats[i]), trans_w[i]) for i in range(n)]
    x_scaled = query_set.points * frame.scale  # tool offsets in cube units
    q = dm.parameter(quats.astype(np.float32))
    t = dm.parameter(frame.to_cube(trans_w).astype(np.float32))
    adam = AdamState(lr=cfg.lr)
    limit = 0.5 - cfg.cube_margin
    energy_hist = np.empty((n, cfg.steps_per_start), np.float64)
    target_t = Tensor(target)

    for step in range(cfg.steps_per_start):
        with Tape() as tape:
            cube_pts = dm.quat_rotate(q, t, x_scaled)
            desc, _ = query_graph(weights, volume, cube_pts)
            resid = dm.sub(dm.reshape(desc, (n, nq * d)), target_t)
            if cfg.energy_norm == "L1":
                energies = dm.sum_(dm.abs_(resid), axis=1)
            else:
                energies = dm.sqrt(dm.sum_(dm.square(resid), axis=1))
            oob = dm.relu(dm.sub(dm.abs_(cube_pts), limit))
            loss = dm.add(dm.sum_(energies),
                          dm.mul(dm.sum_(dm.square(oob)), cfg.out_of_cube_penalty))
            tape.backward(loss)
        energy_hist[:, step] = energies.data
        adam_step({"q": q, "t": t}, adam)
        zero_grads({"q": q, "t": t})
        qn = np.linalg.norm(q.data, axis=1, keepdims=True)
        q.data /= np.maximum(qn, 1e-12)

    # final evaluation without penalty, plus hard feasibility
    final_q = q.data.astype(np.float64)
    final_t = t.data.astype(np.float64)
    candidates = []
    best = None
    for i in range(n):
        pose_n = SE3Pose(quat_to_matrix(final_q[i]), final_t[i])
        pose_w = denormalize_pose(pose_n, frame)
        cube = frame.to_cube(pose_w.apply(query_set.points))
        feasible = bool(np.all(np.abs(cube) <= 0.5))
        e = energy(weights, volume, pose_w, query_set, target.reshape(-1), cfg.energy_norm)
        cand = CandidateTrace(init_poses[i], pose_w, e, feasible, energy_hist[i].copy())
        candidates.append(cand)
        if feasible and np.isfinite(e) and (best is None or e < candidates[best].final_energy):
            best = i
    if best is None:
        return PoseSolveResult(None, float("inf"), candidates, False)
    return PoseSolveResult(candidates[best].final_pose, candidates[best].final_energy,
                           candidates, True)


# --- ICP + RANSAC geometric baseline -----------------------------------------


def _procrustes(src: np.ndarray, dst: np.ndarray) -> SE3Pose:
    """Least-squares rigid transform mapping src onto dst."""
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-12:
        raise PoseError("degenerate correspondence: rank-deficient covariance")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return SE3Pose(r, dc - r @ sc)


def _ransac_proposal(src: np.ndarray, dst: np.ndarray, tree: cKDTree,
                     rng: np.random.Generator, tol: float = 2e-3):
    """Congruent-triangle proposal: a source triple matched to a target
    triple with the same pairwise distances, solved by Procrustes."""
    n = len(src)
    for _ in range(12):
        ids = rng.choice(n, size=3, replace=False)
        a, b, c = src[ids]
        d_ab, d_ac, d_bc = (np.linalg.norm(a - b), np.linalg.norm(a - c),
                            np.linalg.norm(b - c))
        if min(d_ab, d_ac, d_bc) < 4 * tol:
            continue
        t0 = dst[rng.integers(len(dst))]
        cand_b = dst[tree.query_ball_point(t0, d_ab + tol)]
        cand_b = cand_b[np.abs(np.linalg.norm(cand_b - t0, axis=1) - d_ab) < tol]
        rng.shuffle(cand_b)
        for tb in cand_b[:8]:
            cand_c = dst[tree.query_ball_point(t0, d_ac + tol)]
            keep = (np.abs(np.linalg.norm(cand_c - t0, axis=1) - d_ac) < tol) & \
                   (np.abs(np.linalg.norm(cand_c - tb, axis=1) - d_bc) < tol)
            cand_c = cand_c[keep]
            if len(cand_c):
                tc = cand_c[rng.integers(len(cand_c))]
                try:
                    return _procrustes(np.stack([a, b, c]), np.stack([t0, tb, tc]))
                except PoseError:
                    continue
    return None


def _pca_candidates(src: np.ndarray, dst: np.ndarray) -> list[SE3Pose]:
    """Principal-axis alignments: 4 proper-rotation sign combinations."""
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    _, vs = np.linalg.eigh(np.cov((src - sc).T))
    _, vd = np.linalg.eigh(np.cov((dst - dc).T))
    out = []
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                r = vd @ np.diag([sx, sy, sz]) @ vs.T
                if np.linalg.det(r) > 0:
                    out.append(SE3Pose(r, dc - r @ sc))
    return out


def icp_baseline(source: PointCloud, target: PointCloud, n_restarts: int = 20,
                 rng: np.random.Generator | None = None, max_iter: int = 100,
                 tol: float = 1e-8, max_points: int = 400):
    """Point-to-point ICP over a family of initializations.

    Restarts cycle through principal-axis alignments (4 proper sign flips),
    congruent-triple RANSAC proposals, and random rotations with centroids
    aligned; each is refined by ICP with nearest-neighbor correspondences
    and a closed-form Procrustes update until the residual change drops
    below tol.  Returns (best transform mapping source onto target, RMS
    residual, residual history of the winning run).
    """
    rng = rng or np.random.default_rng(0)
    if len(source) < 10 or len(target) < 10:
        raise PoseError("icp needs at least 10 points per cloud")
    src = source.points
    dst = target.points
    if len(src) > max_points:
        src = src[rng.choice(len(src), max_points, replace=False)]
    if len(dst) > max_points:
        dst = dst[rng.choice(len(dst), max_points, replace=False)]
    tree = cKDTree(dst)
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    pca = _pca_candidates(src, dst)

    best_pose, best_res, best_hist = None, np.inf, None
    for restart in range(n_restarts):
        if restart < len(pca):
            pose = pca[restart]
        elif restart % 2 == 1:
            pose = _ransac_proposal(src, dst, tree, rng)
        else:
            pose = None
        if pose is None:
            from .geom import random_rotation

            r = random_rotation(rng)
            pose = SE3Pose(r, dc - r @ sc)
        hist = []
        prev = np.inf
        for _ in range(max_iter):
            moved = pose.apply(src)
            dists, idx = tree.query(moved)
            try:
                pose = _procrustes(src, dst[idx])
            except PoseError:
                break
            res = float(np.sqrt(np.mean(np.sum((pose.apply(src) - dst[idx]) ** 2, axis=1))))
            hist.append(res)
            if prev - res < tol:
                break
            prev = res
        if hist and hist[-1] < best_res:
            best_pose, best_res, best_hist = pose, hist[-1], hist
        if best_res < 1e-9:
            break
    if best_pose is None:
        raise PoseError("all ICP restarts degenerate")
    return best_pose, best_res, np.array(best_hist)
