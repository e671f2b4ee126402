"""Scene bundle I/O: manifest + images + timestamped point clouds, plus primitive
initialization from the point clouds.

Layout: `manifest.json`, `images/{seq}/{cam}/{frame}.png`, `points/{seq}.ply`
(binary little-endian with a per-point `timestamp`), optional `depth/...` as
16-bit PNG millimeters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from . import geometry as geo
from .model import GaussianSet
from .scenegraph import CameraIntrinsics, CameraNode, ObjectNode, SceneGraph, SequenceNode

BUNDLE_FORMAT = "scene-bundle"
BUNDLE_VERSION = 1
DEPTH_UNIT = 1000.0  # millimeters in the 16-bit depth PNGs

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("timestamp", "<f8")])


class BundleError(ValueError):
    pass


def write_ply(path, points: np.ndarray, timestamps: np.ndarray):
    rec = np.empty(len(points), dtype=PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["timestamp"] = timestamps
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property double timestamp\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise BundleError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise BundleError(f"{path}: missing vertex element")
    rec = np.frombuffer(data[end + len(b"end_header\n"):], dtype=PLY_DTYPE, count=n)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return points, rec["timestamp"].astype(np.float64)


def save_image(path, img: np.ndarray):
    """(H, W, 3) float in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_depth(path, depth_m: np.ndarray):
    """Depth in meters -> 16-bit PNG millimeters; non-finite stores as 0 (invalid)."""
    mm = np.where(np.isfinite(depth_m), depth_m * DEPTH_UNIT, 0.0)
    arr = np.clip(mm + 0.5, 0, 65535).astype(np.uint16)
    im = Image.new("I;16", (arr.shape[1], arr.shape[0]))
    im.frombytes(arr.astype("<u2").tobytes())
    im.save(path)


def load_depth(path):
    """Returns (depth meters, valid mask)."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint16)
    valid = arr > 0
    return arr.astype(np.float32) / DEPTH_UNIT, valid


def _pose_from_json(d) -> geo.RigidTransform:
    q = geo.quat_normalize(np.asarray(d["quat"], dtype=np.float64))
    return geo.RigidTransform(geo.quat_to_rotmat(q), np.asarray(d["pos"], dtype=np.float64))


def pose_to_json(rotation_quat, pos):
    return {"quat": [float(v) for v in rotation_quat], "pos": [float(v) for v in pos]}


@dataclass
class ViewRecord:
    sequence: str
    camera: str
    time: float  # normalized to [-1, 1]
    raw_time: float
    image_path: str
    depth_path: str = None
    index: int = 0


@dataclass
class SceneBundle:
    root: Path
    manifest: dict
    graph: SceneGraph
    views: list  # ViewRecord, deterministic order
    points: dict  # sequence id -> (points (N, 3), normalized timestamps (N,))
    time_offset: dict  # sequence id -> raw t0
    time_denominator: float  # raw half-span D/2 used in normalization

    def normalize_time(self, s: str, raw_t: float) -> float:
        return (raw_t - self.time_offset[s]) / self.time_denominator - 1.0

    def load_view_image(self, view: ViewRecord):
        return load_image(self.root / view.image_path)

    def load_view_depth(self, view: ViewRecord):
        if view.depth_path is None:
            return None, None
        return load_depth(self.root / view.depth_path)


def load_bundle(path) -> SceneBundle:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise BundleError(f"missing manifest: {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"{mpath}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != BUNDLE_VERSION:
        raise BundleError(f"{mpath}: unsupported version {manifest.get('version')!r}")
    seqs = manifest.get("sequences", [])
    if not seqs:
        raise BundleError("bundle has no sequences")

    # time normalization: [-1, 1] over the maximum sequence span
    spans = {}
    offsets = {}
    for sq in seqs:
        times = [p["time"] for p in sq["ego_poses"]]
        if not times:
            raise BundleError(f"sequence {sq['id']!r} has no ego poses")
        offsets[sq["id"]] = min(times)
        spans[sq["id"]] = max(times) - min(times)
    denom = max(max(spans.values()) / 2.0, 1e-12)

    graph = SceneGraph()
    views = []
    points = {}
    code = 0
    for sq in seqs:
        sid = sq["id"]
        t0 = offsets[sid]
        norm = lambda t: (t - t0) / denom - 1.0
        ego = sorted(sq["ego_poses"], key=lambda p: p["time"])
        node = SequenceNode(
            sequence_id=sid,
            appearance=np.zeros((32, 13), dtype=np.float32),
            geometry_mod=np.zeros((32, 13), dtype=np.float32),
            ego_times=np.array([norm(p["time"]) for p in ego]),
            ego_quats=np.array([geo.quat_normalize(np.asarray(p["quat"], float)) for p in ego]),
            ego_trans=np.array([p["pos"] for p in ego], dtype=np.float64),
            time_denominator=denom,
        )
        for cam in sq.get("cameras", []):
            intr = CameraIntrinsics(cam["fx"], cam["fy"], cam["cx"], cam["cy"],
                                    cam["width"], cam["height"])
            try:
                intr.validate()
            except ValueError as e:
                raise BundleError(f"camera {cam['id']!r}: {e}") from e
            node.cameras[cam["id"]] = CameraNode(cam["id"], intr, _pose_from_json(cam["mount"]))
        for obj in sq.get("objects", []):
            track = sorted(obj["track"], key=lambda p: p["time"])
            if not track:
                raise BundleError(f"object {obj['id']!r} has an empty track")
            lo, hi = norm(track[0]["time"]), norm(track[-1]["time"])
            if lo < node.ego_times[0] - 1e-9 or hi > node.ego_times[-1] + 1e-9:
                raise BundleError(
                    f"object {obj['id']!r} track leaves the time span of sequence {sid!r}"
                )
            node.objects[obj["id"]] = ObjectNode(
                object_id=obj["id"], code=code, rigid=bool(obj.get("rigid", True)),
                dims=np.asarray(obj["dims"], dtype=np.float64),
                track_times=np.array([norm(p["time"]) for p in track]),
                track_quats=np.array(
                    [geo.quat_normalize(np.asarray(p["quat"], float)) for p in track]
                ),
                track_trans=np.array([p["pos"] for p in track], dtype=np.float64),
                sequence_id=sid,
            )
            code += 1
        graph.sequences[sid] = node

        for i, rec in enumerate(sq.get("images", [])):
            if rec["camera"] not in node.cameras:
                raise BundleError(
                    f"image {rec.get('file')!r} references unknown camera {rec['camera']!r}"
                )
            img_path = root / rec["file"]
            if not img_path.exists():
                raise BundleError(f"missing image file: {img_path}")
            depth_rel = rec.get("depth")
            if depth_rel is not None and not (root / depth_rel).exists():
                raise BundleError(f"missing depth file: {root / depth_rel}")
            views.append(ViewRecord(sid, rec["camera"], norm(rec["time"]), rec["time"],
                                    rec["file"], depth_rel, index=i))

        ply = root / "points" / f"{sid}.ply"
        if ply.exists():
            pts, ts = read_ply(ply)
            points[sid] = (pts, (ts - t0) / denom - 1.0)
        else:
            points[sid] = (np.zeros((0, 3)), np.zeros(0))

    return SceneBundle(root, manifest, graph, views, points, offsets, denom)


def voxel_downsample(points: np.ndarray, voxel: float):
    """One point per occupied voxel at the mean of its members; order-independent."""
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    sp = points[order]
    boundaries = np.any(np.diff(sk, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    sums = np.add.reduceat(sp, starts, axis=0)
    counts = np.diff(np.concatenate([starts, [len(sp)]]))
    return sums / counts[:, None]


def knn_scales(points: np.ndarray, k: int = 3):
    """Isotropic initial scale from mean squared distance to the nearest neighbors."""
    if len(points) <= k:
        return np.full((len(points), 3), 0.05)
    dists, _ = cKDTree(points).query(points, k=k + 1)
    d2 = np.mean(dists[:, 1:] ** 2, axis=1)
    return np.repeat(np.sqrt(np.maximum(d2, 1e-14))[:, None], 3, axis=1)


def init_primitives(bundle: SceneBundle, voxel: float, init_opacity: float = 0.1,
                    dtype=np.float32):
    """Static + per-object Gaussian sets from the timestamped point clouds.

    Points inside an object's box at their own timestamp initialize that object
    (in its canonical frame); the remainder initializes the static set.
    """
    static_pts = []
    object_pts = {}
    for sid, (pts, ts) in bundle.points.items():
        if len(pts) == 0:
            continue
        seq = bundle.graph.sequences[sid]
        claimed = np.zeros(len(pts), dtype=bool)
        for oid, node in seq.objects.items():
            half = node.dims / 2.0
            lo, hi = node.span
            in_span = (ts >= lo) & (ts <= hi)
            idx = np.nonzero(in_span & ~claimed)[0]
            if len(idx) == 0:
                continue
            canon = np.empty((len(idx), 3))
            for j, pi in enumerate(idx):
                pose = geo.interpolate_pose_track(
                    node.track_times, node.track_quats, node.track_trans, float(ts[pi])
                )
                canon[j] = pose.inverse().apply(pts[pi])
            inside = np.all(np.abs(canon) <= half[None, :] * 1.0 + 1e-9, axis=1)
            object_pts.setdefault((sid, oid), []).append(canon[inside])
            claimed[idx[inside]] = True
        static_pts.append(pts[~claimed])

    if not static_pts or sum(len(p) for p in static_pts) == 0:
        raise BundleError("empty point cloud: cannot initialize primitives")
    merged = np.concatenate(static_pts)
    vox = voxel_downsample(merged, voxel)
    static = GaussianSet.from_points(vox, knn_scales(vox), init_opacity, dtype)

    objects = {}
    for (sid, oid), chunks in object_pts.items():
        pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
        if len(pts) == 0:
            continue
        vox = voxel_downsample(pts, voxel)
        objects[(sid, oid)] = GaussianSet.from_points(
            vox, knn_scales(vox), init_opacity, dtype
        )
    # objects annotated in the graph but without points still need (empty) sets
    for sid, seq in bundle.graph.sequences.items():
        for oid in seq.objects:
            objects.setdefault((sid, oid), GaussianSet.empty(dtype))
    return static, objects


def scene_bounds_of(points: np.ndarray, margin: float = 0.05):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    pad = (hi - lo) * margin
    return np.stack([lo - pad, hi + pad])
