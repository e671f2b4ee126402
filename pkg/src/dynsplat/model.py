"""Scene model: Gaussian sets, neural-field bundle, scene graph, and the parameter registry."""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from typing import Dict, Tuple

import numpy as np

from . import geometry as geo
from .fields import DynamicField, GridConfig, StaticField
from .scenegraph import SceneGraph


def inverse_sigmoid(x):
    x = np.asarray(x)
    return np.log(x / (1.0 - x))


@dataclass
class GaussianSet:
    """Primitive parameter arrays for the static scene or one object (raw, pre-activation)."""

    means: np.ndarray  # (N, 3) world frame (static) or canonical meters (objects)
    quats: np.ndarray  # (N, 4) unnormalized
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    is_background: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        if self.is_background is None:
            self.is_background = np.zeros(len(self.means), dtype=bool)

    def __len__(self):
        return len(self.means)

    @staticmethod
    def empty(dtype=np.float32) -> "GaussianSet":
        return GaussianSet(
            np.zeros((0, 3), dtype), np.zeros((0, 4), dtype),
            np.zeros((0, 3), dtype), np.zeros(0, dtype),
        )

    @staticmethod
    def from_points(points, scales, opacity, dtype=np.float32) -> "GaussianSet":
        n = len(points)
        quats = np.zeros((n, 4), dtype)
        quats[:, 0] = 1.0
        logits = np.full(n, inverse_sigmoid(opacity), dtype)
        return GaussianSet(points.astype(dtype), quats, np.log(scales).astype(dtype), logits)

    def unit_quats(self):
        return geo.quat_normalize(self.quats)

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self):
        return geo.build_covariance(self.unit_quats(), self.scales())

    def select(self, mask) -> "GaussianSet":
        return GaussianSet(
            self.means[mask], self.quats[mask], self.log_scales[mask],
            self.opacity_logits[mask], self.is_background[mask],
        )

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.quats, other.quats]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.is_background, other.is_background]),
        )


@dataclass
class ModelConfig:
    # static field
    static_levels: int = 16
    static_log2: int = 19
    static_base_res: int = 16
    static_max_res: int = 2048
    # dynamic field (object appearance + deformation); table shrinks in
    # single-sequence mode
    dyn_levels: int = 8
    dyn_log2: int = 17
    dyn_log2_single_seq: int = 15
    dyn_base_res: int = 16
    dyn_max_res: int = 1024
    hidden: int = 64
    code_dim: int = 64
    time_freqs: int = 6
    near: float = 1.0  # meters; scaled by the scene scale at projection time
    blur_2d: float = 0.3
    tile: int = 16
    dtype: str = "float32"
    seed: int = 0

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def gamma_dim(self):
        return 1 + 2 * self.time_freqs

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @staticmethod
    def from_dict(d):
        cfg = ModelConfig()
        for f in dc_fields(ModelConfig):
            if f.name in d:
                setattr(cfg, f.name, d[f.name])
        return cfg


@dataclass
class FieldBundle:
    static: StaticField
    dyn_rigid: DynamicField
    dyn_nonrigid: DynamicField

    @staticmethod
    def create(cfg: ModelConfig, single_sequence: bool, rng) -> "FieldBundle":
        dtype = cfg.np_dtype
        static = StaticField.create(
            GridConfig(cfg.static_levels, cfg.static_log2, cfg.static_base_res, cfg.static_max_res),
            cfg.code_dim, cfg.hidden, rng, dtype,
        )
        dyn_log2 = cfg.dyn_log2_single_seq if single_sequence else cfg.dyn_log2
        make_dyn = lambda: DynamicField.create(
            GridConfig(cfg.dyn_levels, dyn_log2, cfg.dyn_base_res, cfg.dyn_max_res, four_d=True),
            cfg.code_dim, cfg.gamma_dim, cfg.hidden, rng, dtype,
        )
        # rigid and non-rigid instances use two identical, separately-weighted networks
        return FieldBundle(static, make_dyn(), make_dyn())

    def field_for(self, rigid: bool) -> DynamicField:
        return self.dyn_rigid if rigid else self.dyn_nonrigid


@dataclass
class SceneModel:
    config: ModelConfig
    graph: SceneGraph
    static: GaussianSet
    objects: Dict[Tuple[str, str], GaussianSet]  # (sequence_id, object_id) -> set
    fields: FieldBundle
    scene_center: np.ndarray  # (3,)
    scene_scale: float  # meters per contraction unit (scene fits the unit ball)
    scene_bounds: np.ndarray  # (2, 3) min/max of the initial static points

    def object_set(self, s: str, o: str) -> GaussianSet:
        key = (s, o)
        if key not in self.objects:
            raise KeyError(f"no Gaussian set for object {o!r} in sequence {s!r}")
        return self.objects[key]

    def normalize_positions(self, x):
        return (x - self.scene_center.astype(x.dtype)) / np.asarray(
            self.scene_scale, dtype=x.dtype
        )

    def total_primitives(self) -> int:
        return len(self.static) + sum(len(g) for g in self.objects.values())

    def parameters(self) -> Dict[str, np.ndarray]:
        """Flat name -> array views of every optimizable parameter."""
        p = {}
        for prefix, gs in self.gaussian_sets().items():
            p[f"{prefix}.means"] = gs.means
            p[f"{prefix}.quats"] = gs.quats
            p[f"{prefix}.log_scales"] = gs.log_scales
            p[f"{prefix}.opacity_logits"] = gs.opacity_logits
        for fname, fobj in (("phi", self.fields.static), ("psi_r", self.fields.dyn_rigid),
                            ("psi_n", self.fields.dyn_nonrigid)):
            for lv, table in enumerate(fobj.grid.tables):
                p[f"{fname}.table.{lv}"] = table
            heads = [("color", fobj.mlp_color)]
            heads.append(("atten", fobj.mlp_atten) if fname == "phi" else ("deform", fobj.mlp_deform))
            for hname, mlp in heads:
                for pname, arr in mlp.param_arrays():
                    p[f"{fname}.{hname}.{pname}"] = arr
        for s, seq in self.graph.sequences.items():
            p[f"seq.{s}.appearance"] = seq.appearance
            p[f"seq.{s}.geometry"] = seq.geometry_mod
            p[f"pose.ego.{s}"] = seq.ego_residuals
            for c, cam in seq.cameras.items():
                p[f"pose.cam.{s}.{c}"] = cam.residual
            for o, obj in seq.objects.items():
                p[f"pose.obj.{s}.{o}"] = obj.residuals
        return p

    def gaussian_sets(self) -> Dict[str, GaussianSet]:
        """Prefix -> set, for parameter naming and density control."""
        out = {"static": self.static}
        for (s, o), gs in self.objects.items():
            out[f"object.{s}.{o}"] = gs
        return out

    def set_by_prefix(self, prefix: str) -> GaussianSet:
        if prefix == "static":
            return self.static
        _, s, o = prefix.split(".", 2)
        return self.objects[(s, o)]

    def replace_set(self, prefix: str, gs: GaussianSet):
        if prefix == "static":
            self.static = gs
        else:
            _, s, o = prefix.split(".", 2)
            self.objects[(s, o)] = gs

    def zero_grads(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.parameters().items()}
