"""Sky and far-field primitives on concentric spheres around the scene.

Spheres of radius 4r, 8r, 16r (r = half the scene-bound diameter) are sampled
with the Fibonacci spiral; samples below the ground plane, occluded by
foreground points, or outside every training frustum are dropped.
"""

from __future__ import annotations

import numpy as np

from .model import GaussianSet

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
SPHERE_RADII_FACTORS = (4.0, 8.0, 16.0)  # r * 2^(i+1) for i in 1..3
BACKGROUND_OPACITY = 0.5


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """n points on the sphere, spiral pattern with golden-angle longitude steps."""
    if n < 1:
        raise ValueError("fibonacci_sphere needs n >= 1")
    i = np.arange(n)
    z = (i + 0.5) * (2.0 / n) - 1.0
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = i * GOLDEN_ANGLE
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return pts * radius


def ground_height(points: np.ndarray, percentile: float = 1.0) -> float:
    """Robust ground estimate: low percentile of the initial point heights."""
    return float(np.percentile(points[:, 2], percentile))


def _in_frustum(points, pose, intr, margin: float = 0.0):
    R = pose.rotation
    t = pose.translation
    x = (points - t) @ R
    z = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * x[:, 0] / z + intr.cx
        v = intr.fy * x[:, 1] / z + intr.cy
    return (z > 0) & (u >= -margin) & (u < intr.width + margin) \
        & (v >= -margin) & (v < intr.height + margin), u, v, z


def generate_background(
    scene_bounds: np.ndarray,  # (2, 3) min/max of the foreground scene
    cameras,  # list of (RigidTransform world<-cam, CameraIntrinsics)
    occupancy_points: np.ndarray,  # (P, 3) foreground points for ground/occlusion
    n_per_sphere: int = 50_000,
    dtype=np.float32,
) -> GaussianSet:
    center = 0.5 * (scene_bounds[0] + scene_bounds[1])
    r = 0.5 * float(np.linalg.norm(scene_bounds[1] - scene_bounds[0]))
    ground_z = ground_height(occupancy_points) if len(occupancy_points) else -np.inf

    kept_pts, kept_scales = [], []
    for factor in SPHERE_RADII_FACTORS:
        radius = factor * r
        pts = fibonacci_sphere(n_per_sphere, radius) + center
        # half the neighbor spacing on the sphere: a 2-sigma footprint closes the gaps
        spacing = 0.5 * radius * np.sqrt(4.0 * np.pi / n_per_sphere)

        above = pts[:, 2] > ground_z
        pts = pts[above]

        visible = np.zeros(len(pts), dtype=bool)
        for pose, intr in cameras:
            in_view, u, v, z = _in_frustum(pts, pose, intr)
            if not np.any(in_view):
                continue
            # occlusion: a nearer foreground point landing in the same pixel blocks it
            occ_ok = np.ones(len(pts), dtype=bool)
            if len(occupancy_points):
                fg_in, fu, fv, fz = _in_frustum(occupancy_points, pose, intr)
                depth_map = np.full((intr.height, intr.width), np.inf)
                if np.any(fg_in):
                    pu = fu[fg_in].astype(np.int64)
                    pv = fv[fg_in].astype(np.int64)
                    np.minimum.at(depth_map, (pv, pu), fz[fg_in])
                iu = np.clip(np.nan_to_num(u, nan=0.0, posinf=0.0, neginf=0.0), 0,
                             intr.width - 1).astype(np.int64)
                iv = np.clip(np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0), 0,
                             intr.height - 1).astype(np.int64)
                occ_ok = ~(depth_map[iv, iu] < z)
            visible |= in_view & occ_ok
        kept_pts.append(pts[visible])
        kept_scales.append(np.full((int(visible.sum()), 3), spacing))

    if kept_pts:
        points = np.concatenate(kept_pts)
        scales = np.concatenate(kept_scales)
    else:
        points = np.zeros((0, 3))
        scales = np.zeros((0, 3))
    gs = GaussianSet.from_points(points, np.maximum(scales, 1e-6), BACKGROUND_OPACITY, dtype)
    gs.is_background[:] = True
    return gs
