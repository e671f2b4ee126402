"""Procedural two-sequence scene bundles with ray-cast ground truth.

The generated world: a textured ground plane, two static boxes, one transient
banner present only in the first sequence, and per sequence one rigid mover
plus one non-rigid "breather" whose vertices pulse over time. Ground truth
color/depth/masks come from direct per-pixel ray casting (independent of the
splatting renderer); point clouds sample the surfaces with per-point timestamps.
The second sequence applies a global color grading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from PIL import Image

from . import geometry as geo
from .bundle import pose_to_json, save_depth, save_image, write_ply
from .scenegraph import CameraIntrinsics

SUN = np.array([0.42, -0.35, 0.82])
SUN_DIR = SUN / np.linalg.norm(SUN)
TRANSIENT_MASK_VALUE = 200
FAR_SKY_DEPTH = 50.0  # synthetic "far return" so sky pixels carry depth supervision


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """world<-camera pose: +z optical axis towards target, y down."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(fwd, up)
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd], axis=1)
    return geo.RigidTransform(R, position)


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    color: np.ndarray
    stripe_axis: int = 2
    stripe_freq: float = 4.0


@dataclass
class Mover:
    object_id: str
    rigid: bool
    half_base: np.ndarray
    start: np.ndarray
    end: np.ndarray
    color: np.ndarray
    breathe: float = 0.0  # relative amplitude of the vertex pulsing
    phase: float = 0.0

    def center(self, u: float) -> np.ndarray:
        return self.start + (self.end - self.start) * u

    def half(self, u: float) -> np.ndarray:
        return self.half_base * (1.0 + self.breathe * np.sin(2 * np.pi * u + self.phase))

    def dims(self) -> np.ndarray:
        return 2.0 * self.half_base * (1.0 + abs(self.breathe))


@dataclass
class SceneSpec:
    seed: int = 1
    frames: int = 24
    size: int = 64
    fps: float = 10.0
    supersample: int = 2
    ground_extent: float = 8.0

    def times(self):
        return np.arange(self.frames) / self.fps

    def duration(self):
        return (self.frames - 1) / self.fps


def build_world(spec: SceneSpec):
    rng = np.random.default_rng(spec.seed)
    static_boxes = [
        Box(np.array([-2.2, 1.6, 0.7]), np.array([0.9, 0.8, 0.7]),
            np.array([0.75, 0.55, 0.35]) + rng.uniform(-0.05, 0.05, 3)),
        Box(np.array([2.4, 2.0, 1.0]), np.array([0.8, 0.9, 1.0]),
            np.array([0.45, 0.55, 0.75]) + rng.uniform(-0.05, 0.05, 3), stripe_axis=0),
    ]
    banner = Box(np.array([0.8, 2.6, 1.7]), np.array([0.55, 0.08, 1.5]),
                 np.array([0.85, 0.3, 0.3]) + rng.uniform(-0.05, 0.05, 3))
    movers = {
        "seq_a": [
            Mover("car_a", True, np.array([0.85, 0.5, 0.45]),
                  np.array([-3.2, -0.9, 0.45]), np.array([3.2, -0.9, 0.45]),
                  np.array([0.8, 0.25, 0.2]) + rng.uniform(-0.05, 0.05, 3)),
            Mover("ped_a", False, np.array([0.42, 0.42, 0.95]),
                  np.array([2.4, -2.3, 0.95]), np.array([-2.4, -2.3, 0.95]),
                  np.array([0.25, 0.6, 0.3]) + rng.uniform(-0.05, 0.05, 3),
                  breathe=0.3, phase=rng.uniform(0, np.pi)),
        ],
        "seq_b": [
            Mover("car_b", True, np.array([0.85, 0.5, 0.45]),
                  np.array([3.0, -0.4, 0.45]), np.array([-3.0, -0.4, 0.45]),
                  np.array([0.3, 0.35, 0.8]) + rng.uniform(-0.05, 0.05, 3)),
            Mover("ped_b", False, np.array([0.42, 0.42, 0.95]),
                  np.array([-2.2, -2.6, 0.95]), np.array([2.2, -2.6, 0.95]),
                  np.array([0.7, 0.55, 0.2]) + rng.uniform(-0.05, 0.05, 3),
                  breathe=0.3, phase=rng.uniform(0, np.pi)),
        ],
    }
    grading = {
        "seq_a": (np.ones(3), np.zeros(3)),
        "seq_b": (np.array([0.72, 0.78, 1.0]), np.array([0.02, 0.02, 0.1])),
    }
    return {"static": static_boxes, "banner": banner, "movers": movers, "grading": grading}


def _ground_albedo(p):
    x, y = p[..., 0], p[..., 1]
    base = np.stack([
        0.36 + 0.1 * np.sin(1.3 * x) * np.sin(0.9 * y),
        0.4 + 0.09 * np.sin(1.1 * x + 1.0) * np.sin(1.2 * y),
        0.33 + 0.07 * np.sin(0.8 * x) * np.cos(1.1 * y),
    ], axis=-1)
    return base + 0.04 * np.sin(0.35 * x)[..., None]


def _box_albedo(p, box_color, axis, freq):
    coord = p[..., axis]
    stripe = 0.12 * np.sin(freq * coord)
    return np.clip(box_color[None] + stripe[..., None], 0.02, 1.0)


def _intersect_ground(origin, dirs, extent):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    p = origin[None] + t[:, None] * dirs
    valid = (dz < -1e-9) & (t > 0.05) & (np.abs(p[:, 0]) <= extent) & (np.abs(p[:, 1]) <= extent)
    return np.where(valid, t, np.inf), p


def _intersect_box(origin, dirs, center, half):
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (center - half - origin) / safe
    t2 = (center + half - origin) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_in = tmin.max(axis=1)
    t_out = tmax.min(axis=1)
    hit = (t_out >= t_in) & (t_in > 0.05)
    axis = np.argmax(tmin, axis=1)
    sign = -np.sign(np.take_along_axis(dirs, axis[:, None], 1)[:, 0])
    return np.where(hit, t_in, np.inf), axis, sign


def render_ground_truth(spec: SceneSpec, world, sequence: str, pose, intr, t_u: float):
    """Direct dense ray sampling of the analytic scene at normalized track phase t_u.

    Returns (color (H, W, 3), depth (H, W) camera-frame z with 0 = sky, mask (H, W) uint8).
    """
    ss = spec.supersample
    H, W = intr.height, intr.width
    ys, xs = np.mgrid[0:H * ss, 0:W * ss]
    u = (xs.ravel() + 0.5) / ss
    v = (ys.ravel() + 0.5) / ss
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(u.size)], axis=1)
    dirs = d_cam @ pose.rotation.T  # camera z=1 scaling: hit t equals view-space depth
    origin = pose.translation

    best_t, _ = _intersect_ground(origin, dirs, spec.ground_extent)
    p_hit = origin[None] + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * dirs
    color = _ground_albedo(p_hit)
    normal = np.zeros_like(dirs)
    normal[:, 2] = 1.0
    mask = np.zeros(u.size, dtype=np.uint8)

    boxes = list(world["static"])
    tags = [0] * len(boxes)
    if sequence == "seq_a":
        boxes.append(world["banner"])
        tags.append(TRANSIENT_MASK_VALUE)
    for i, mover in enumerate(world["movers"][sequence]):
        boxes.append(Box(mover.center(t_u), mover.half(t_u), mover.color))
        tags.append(i + 1)

    for box, tag in zip(boxes, tags):
        t, axis, sign = _intersect_box(origin, dirs, box.center, box.half)
        closer = t < best_t
        if not np.any(closer):
            continue
        ph = origin[None] + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        alb = _box_albedo(ph, box.color, box.stripe_axis, box.stripe_freq)
        n = np.zeros_like(dirs)
        np.put_along_axis(n, axis[:, None], sign[:, None], 1)
        best_t = np.where(closer, t, best_t)
        color = np.where(closer[:, None], alb, color)
        normal = np.where(closer[:, None], n, normal)
        mask = np.where(closer, np.uint8(tag), mask)

    lambert = 0.45 + 0.55 * np.maximum(normal @ SUN_DIR, 0.0)
    color = color * lambert[:, None]

    sky_t = np.clip(dirs[:, 2] / np.linalg.norm(dirs, axis=1), 0, 1)
    sky = np.stack([0.62 - 0.25 * sky_t, 0.72 - 0.2 * sky_t, 0.92 - 0.12 * sky_t], axis=1)
    is_sky = ~np.isfinite(best_t)
    color = np.where(is_sky[:, None], sky, color)

    scale, offset = world["grading"][sequence]
    color = np.clip(color * scale[None] + offset[None], 0.0, 1.0)

    def pool(img, ch):
        return img.reshape(H, ss, W, ss, ch).mean(axis=(1, 3))

    color = pool(color.reshape(H * ss, W * ss, 3), 3)
    depth_full = np.where(is_sky, 0.0, best_t).reshape(H * ss, W * ss, 1)
    depth = pool(depth_full, 1)[..., 0]
    sky_frac = pool(is_sky.astype(np.float64).reshape(H * ss, W * ss, 1), 1)[..., 0]
    # pure sky reads as a far return; silhouette-mixed pixels carry no supervision
    depth = np.where(sky_frac >= 1.0, FAR_SKY_DEPTH,
                     np.where(sky_frac > 0.0, 0.0, depth))
    mask = mask.reshape(H * ss, W * ss)[::ss, ::ss]
    return color, depth, mask


def _sample_box_surface(center, half, spacing):
    pts = []
    for axis in range(3):
        others = [o for o in range(3) if o != axis]
        n0 = max(int(2 * half[others[0]] / spacing), 2)
        n1 = max(int(2 * half[others[1]] / spacing), 2)
        g0, g1 = np.meshgrid(np.linspace(-half[others[0]], half[others[0]], n0),
                             np.linspace(-half[others[1]], half[others[1]], n1))
        for sgn in (-1.0, 1.0):
            face = np.zeros((g0.size, 3))
            face[:, axis] = sgn * half[axis]
            face[:, others[0]] = g0.ravel()
            face[:, others[1]] = g1.ravel()
            pts.append(face + center)
    return np.concatenate(pts)


def _sample_points(spec: SceneSpec, world, sequence: str, times):
    """Surface point cloud with per-point timestamps (statics stamped at t=0)."""
    pts, ts = [], []
    e = spec.ground_extent * 0.95
    g = np.arange(-e, e, 0.14)
    gx, gy = np.meshgrid(g, g)
    ground = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    keep = (np.abs(ground[:, 0]) < 7.0) & (ground[:, 1] > -7.0)
    pts.append(ground[keep])
    boxes = list(world["static"])
    if sequence == "seq_a":
        boxes.append(world["banner"])
    for box in boxes:
        pts.append(_sample_box_surface(box.center, box.half, 0.1))
    for arr in pts:
        ts.append(np.full(len(arr), times[0]))

    duration = times[-1] - times[0]
    for mover in world["movers"][sequence]:
        for tk in times[::4]:
            u = (tk - times[0]) / duration
            p = _sample_box_surface(mover.center(u), mover.half(u), 0.09)
            pts.append(p)
            ts.append(np.full(len(p), tk))
    return np.concatenate(pts), np.concatenate(ts)


def make_synthetic_bundle(out_dir, seed: int = 1, frames: int = 24, size: int = 64):
    """Write a two-sequence synthetic bundle; byte-identical for a fixed seed."""
    spec = SceneSpec(seed=seed, frames=frames, size=size)
    world = build_world(spec)
    out = Path(out_dir)
    times = spec.times()
    duration = spec.duration()

    f = size * 1.15
    intr = {"fx": f, "fy": f, "cx": size / 2.0, "cy": size / 2.0, "width": size, "height": size}
    cam_intr = CameraIntrinsics(**intr)

    sequences = []
    mask_values = {}
    for sid in ("seq_a", "seq_b"):
        (out / "images" / sid / "cam0").mkdir(parents=True, exist_ok=True)
        (out / "depth" / sid / "cam0").mkdir(parents=True, exist_ok=True)
        (out / "masks" / sid / "cam0").mkdir(parents=True, exist_ok=True)
        (out / "points").mkdir(parents=True, exist_ok=True)

        ego_poses = []
        images = []
        for i, tk in enumerate(times):
            u = tk / duration
            cam_pos = np.array([-3.2 + 6.4 * u, -6.3, 1.7])
            pose = look_at(cam_pos, np.array([0.35 * np.sin(2.2 * u), 0.2, 0.9]))
            ego_poses.append({"time": float(tk),
                              **pose_to_json(geo.rotmat_to_quat(pose.rotation), pose.translation)})
            color, depth, mask = render_ground_truth(spec, world, sid, pose, cam_intr, u)
            img_rel = f"images/{sid}/cam0/{i:06d}.png"
            dep_rel = f"depth/{sid}/cam0/{i:06d}.png"
            save_image(out / img_rel, color)
            save_depth(out / dep_rel, np.where(depth > 0, depth, np.inf))
            Image.fromarray(mask, mode="L").save(out / "masks" / sid / "cam0" / f"{i:06d}.png")
            images.append({"camera": "cam0", "time": float(tk), "file": img_rel,
                           "depth": dep_rel})

        objects = []
        for idx, mover in enumerate(world["movers"][sid]):
            track = []
            for tk in times:
                u = tk / duration
                track.append({"time": float(tk),
                              **pose_to_json([1.0, 0.0, 0.0, 0.0], mover.center(u))})
            objects.append({"id": mover.object_id, "rigid": mover.rigid,
                            "dims": [float(v) for v in mover.dims()], "track": track})
            mask_values[mover.object_id] = idx + 1
        mask_values["banner"] = TRANSIENT_MASK_VALUE

        pts, ts = _sample_points(spec, world, sid, times)
        write_ply(out / "points" / f"{sid}.ply", pts, ts)

        sequences.append({
            "id": sid,
            "ego_poses": ego_poses,
            "cameras": [{"id": "cam0", **intr,
                         "mount": pose_to_json([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0])}],
            "objects": objects,
            "images": images,
        })

    manifest = {"format": "scene-bundle", "version": 1, "sequences": sequences}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    meta = {"seed": seed, "frames": frames, "size": size, "mask_values": mask_values,
            "duration": duration, "sky_depth": FAR_SKY_DEPTH}
    with open(out / "synthetic.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return meta
