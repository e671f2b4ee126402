"""Scene graph: sequence/camera/object nodes with latent codes at nodes and rigid transforms on edges.

Rendering traverses the graph read-only; the trainer mutates residuals and
modulation matrices between render calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    SE2_UPRIGHT,
    SE3,
    RigidTransform,
    TangentResidual,
    apply_residual,
    compose_backward,
    interpolate_pose_track,
    residual_backward,
    track_bracket,
)


def encode_time(t: float, freqs: int) -> np.ndarray:
    """[t, sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^(F-1) pi t), cos(2^(F-1) pi t)]."""
    out = np.empty(1 + 2 * freqs)
    out[0] = t
    for f in range(freqs):
        arg = (2.0**f) * np.pi * t
        out[1 + 2 * f] = np.sin(arg)
        out[2 + 2 * f] = np.cos(arg)
    return out


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
        )


@dataclass
class CameraNode:
    camera_id: str
    intrinsics: CameraIntrinsics
    mount: RigidTransform  # camera frame -> ego frame
    residual: np.ndarray = field(default_factory=lambda: np.zeros(6))  # se3


@dataclass
class ObjectNode:
    object_id: str
    code: int
    rigid: bool
    dims: np.ndarray  # (3,) full extents, meters
    track_times: np.ndarray  # (T,)
    track_quats: np.ndarray  # (T, 4)
    track_trans: np.ndarray  # (T, 3), object -> ego
    sequence_id: str = ""
    residuals: np.ndarray = field(default=None)  # (T, 3) se2-upright per keyframe

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.float64)
        if np.any(self.dims <= 0):
            raise ValueError(f"object {self.object_id!r} has non-positive dimensions")
        self.track_times = np.asarray(self.track_times, dtype=np.float64)
        self.track_quats = np.asarray(self.track_quats, dtype=np.float64)
        self.track_trans = np.asarray(self.track_trans, dtype=np.float64)
        if np.any(np.diff(self.track_times) <= 0):
            raise ValueError(f"object {self.object_id!r} track times must be strictly increasing")
        if self.residuals is None:
            self.residuals = np.zeros((len(self.track_times), 3))

    @property
    def span(self):
        return float(self.track_times[0]), float(self.track_times[-1])


@dataclass
class SequenceNode:
    sequence_id: str
    appearance: np.ndarray  # A_s, (code_dim/2, 1+2F)
    geometry_mod: np.ndarray  # G_s, same shape
    ego_times: np.ndarray
    ego_quats: np.ndarray
    ego_trans: np.ndarray  # ego -> world
    cameras: dict = field(default_factory=dict)
    objects: dict = field(default_factory=dict)
    time_denominator: float = 1.0  # raw-time half-span used for [-1, 1] normalization
    ego_residuals: np.ndarray = field(default=None)  # (T, 6) se3 per keyframe

    def __post_init__(self):
        self.ego_times = np.asarray(self.ego_times, dtype=np.float64)
        self.ego_quats = np.asarray(self.ego_quats, dtype=np.float64)
        self.ego_trans = np.asarray(self.ego_trans, dtype=np.float64)
        if self.ego_residuals is None:
            self.ego_residuals = np.zeros((len(self.ego_times), 6))


@dataclass
class SceneGraph:
    sequences: dict = field(default_factory=dict)
    time_freqs: int = 6
    code_dim: int = 64

    def sequence(self, s: str) -> SequenceNode:
        if s not in self.sequences:
            raise KeyError(f"unknown sequence id {s!r}")
        return self.sequences[s]

    def camera(self, s: str, c: str) -> CameraNode:
        seq = self.sequence(s)
        if c not in seq.cameras:
            raise KeyError(f"unknown camera id {c!r} in sequence {s!r}")
        return seq.cameras[c]

    def object(self, s: str, o: str) -> ObjectNode:
        seq = self.sequence(s)
        if o not in seq.objects:
            raise KeyError(f"unknown object id {o!r} in sequence {s!r}")
        return seq.objects[o]

    def gamma(self, t: float) -> np.ndarray:
        return encode_time(t, self.time_freqs)

    def sequence_latent(self, s: str, t: float) -> np.ndarray:
        """omega_s^t = concat(A_s gamma(t), G_s gamma(t))."""
        seq = self.sequence(s)
        g = self.gamma(t).astype(seq.appearance.dtype)
        return np.concatenate([seq.appearance @ g, seq.geometry_mod @ g])

    def sequence_latent_backward(self, s: str, t: float, grad: np.ndarray):
        """Gradients of the latent w.r.t. the modulation matrices: (dA_s, dG_s)."""
        seq = self.sequence(s)
        g = self.gamma(t)
        half = seq.appearance.shape[0]
        return np.outer(grad[:half], g), np.outer(grad[half:], g)

    def object_latent(self, s: str, o: str, t: float):
        """(integer object code, time encoding) pair for the dynamic field."""
        node = self.object(s, o)
        lo, hi = node.span
        return node.code, self.gamma(min(max(t, lo), hi))

    def active_objects(self, s: str, t: float):
        """Objects of s whose track span contains t, ordered by object id."""
        seq = self.sequence(s)
        out = [node for node in seq.objects.values() if node.span[0] <= t <= node.span[1]]
        return sorted(out, key=lambda n: n.object_id)

    def resolve_ego(self, s: str, t: float) -> "ResolvedPose":
        seq = self.sequence(s)
        base = interpolate_pose_track(seq.ego_times, seq.ego_quats, seq.ego_trans, t)
        i0, i1, u = track_bracket(seq.ego_times, t)
        values = (1.0 - u) * seq.ego_residuals[i0] + u * seq.ego_residuals[i1]
        residual = TangentResidual(SE3, values)
        return ResolvedPose(base, residual, (i0, i1, u), apply_residual(base, residual))

    def resolve_camera(self, s: str, c: str, t: float):
        """(world <- camera transform with residuals applied, intrinsics, pose chain)."""
        cam = self.camera(s, c)
        ego = self.resolve_ego(s, t)
        mount_res = TangentResidual(SE3, cam.residual)
        child = ResolvedPose(cam.mount, mount_res, None, apply_residual(cam.mount, mount_res))
        chain = PoseChain(s, ("camera", c), ego, child)
        return chain.final, cam.intrinsics, chain

    def resolve_world_from_object(self, s: str, o: str, t: float):
        """(world <- object transform with residuals applied, pose chain)."""
        node = self.object(s, o)
        lo, hi = node.span
        tc = min(max(t, lo), hi)
        ego = self.resolve_ego(s, t)
        base = interpolate_pose_track(node.track_times, node.track_quats, node.track_trans, tc)
        i0, i1, u = track_bracket(node.track_times, tc)
        values = (1.0 - u) * node.residuals[i0] + u * node.residuals[i1]
        residual = TangentResidual(SE2_UPRIGHT, values)
        child = ResolvedPose(base, residual, (i0, i1, u), apply_residual(base, residual))
        chain = PoseChain(s, ("object", o), ego, child)
        return chain.final, chain


@dataclass
class ResolvedPose:
    base: RigidTransform
    residual: TangentResidual
    bracket: Optional[tuple]  # (i0, i1, u) into a per-keyframe residual array, or None
    final: RigidTransform


@dataclass
class PoseChain:
    """final = [Exp(r_parent) o parent_base] o [Exp(r_child) o child_base]."""

    sequence_id: str
    child_key: tuple  # ("camera", id) | ("object", id)
    parent: ResolvedPose
    child: ResolvedPose

    @property
    def final(self) -> RigidTransform:
        return self.parent.final @ self.child.final

    def backward(self, grad_R: np.ndarray, grad_t: np.ndarray):
        """Residual-vector gradients given matrix gradients of the final transform.

        Returns (parent_grad (6,), child_grad (6 or 3,)).
        """
        (gR_p, gt_p), (gR_c, gt_c) = compose_backward(
            self.parent.final, self.child.final, grad_R, grad_t
        )
        g_parent = residual_backward(self.parent.residual, self.parent.base, gR_p, gt_p)
        g_child = residual_backward(self.child.residual, self.child.base, gR_c, gt_c)
        return g_parent, g_child


def scatter_bracket(target: np.ndarray, bracket, grad: np.ndarray):
    """Accumulate a lerped residual's gradient back onto its keyframe rows."""
    i0, i1, u = bracket
    target[i0] += (1.0 - u) * grad
    if i1 != i0:
        target[i1] += u * grad
