"""End-to-end optimization: training loop, pose refinement, and the modified
adaptive density control (absolute positional-gradient criterion plus a maximum
screen-size splitting criterion, growth cap, and bounds-aware pruning)."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional

import numpy as np

from . import geometry as geo
from . import pipeline as pl
from .loss import LossWeights, compute_loss
from .metrics import psnr
from .model import ModelConfig, SceneModel
from .optim import Adam, GroupSpec, default_groups


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 30000
    seed: int = 1
    threads: int = 1
    # loss
    lambda_rgb: float = 0.8
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.05
    # optimizer (per-attribute learning rates and schedules)
    lr_means: float = 1.6e-5
    lr_means_final: float = 1.6e-6
    lr_opacity: float = 5e-2
    lr_scales: float = 1e-3
    lr_rotations: float = 1e-3
    lr_fields: float = 2.5e-3
    lr_fields_final: float = 2.5e-4
    lr_codes: float = 5e-4
    lr_poses: float = 1e-5
    lr_poses_final: float = 1e-6
    pose_weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    # adaptive density control
    densify_grad_threshold: float = 0.0006
    opacity_prune_threshold: float = 0.005
    screen_size_threshold: float = 20.0  # px
    max_primitives: int = 200000
    adc_warmup: int = 500
    adc_interval: int = 100
    adc_stop_fraction: float = 0.5
    percent_dense: float = 0.01
    split_scale_shrink: float = 1.6
    world_size_prune: float = 0.1  # of scene extent, applied inside scene bounds
    # initialization
    voxel_size: float = 0.1  # single-sequence default; 0.15 for multi-sequence
    voxel_size_multi: float = 0.15
    init_opacity: float = 0.1
    background_points: int = 2000
    # evaluation protocol
    holdout_every: int = 10
    optimize_eval_poses: bool = False
    # desk-scale model architecture
    static_levels: int = 16
    static_log2: int = 19
    static_max_res: int = 2048
    dyn_levels: int = 8
    dyn_log2: int = 17
    dyn_max_res: int = 1024
    hidden: int = 64
    near: float = 1.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            static_levels=self.static_levels, static_log2=self.static_log2,
            static_max_res=self.static_max_res,
            dyn_levels=self.dyn_levels, dyn_log2=self.dyn_log2, dyn_max_res=self.dyn_max_res,
            hidden=self.hidden, near=self.near, seed=self.seed,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rgb, self.lambda_ssim, self.lambda_depth)

    def adc_stop_step(self) -> int:
        return int(self.steps * self.adc_stop_fraction)

    def optimizer_groups(self, position_lr_scale: float) -> dict:
        g = default_groups(position_lr_scale)
        g["means"] = GroupSpec(self.lr_means * position_lr_scale,
                               self.lr_means_final * position_lr_scale)
        g["opacity_logits"] = GroupSpec(self.lr_opacity)
        g["log_scales"] = GroupSpec(self.lr_scales)
        g["quats"] = GroupSpec(self.lr_rotations)
        g["fields"] = GroupSpec(self.lr_fields, self.lr_fields_final)
        g["codes"] = GroupSpec(self.lr_codes)
        g["poses"] = GroupSpec(self.lr_poses, self.lr_poses_final,
                               weight_decay=self.pose_weight_decay)
        return g

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dc_fields(self)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "TrainConfig":
        cfg = TrainConfig()
        known = {f.name: f.type for f in dc_fields(TrainConfig)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, val.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(val))
            elif isinstance(current, float):
                setattr(cfg, key, float(val))
            else:
                setattr(cfg, key, val)
        return cfg

    @staticmethod
    def load(path) -> "TrainConfig":
        with open(path) as fh:
            return TrainConfig.from_text(fh.read())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass
class TrainView:
    sequence: str
    camera: str
    time: float
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: Optional[np.ndarray] = None  # (H, W) meters
    depth_mask: Optional[np.ndarray] = None
    name: str = ""


class AdcStats:
    """Per-primitive accumulators between density-control steps."""

    def __init__(self, model: SceneModel):
        self.reset(model)

    def reset(self, model: SceneModel):
        self.stat = {}
        self.count = {}
        self.max_radius = {}
        for prefix, gs in model.gaussian_sets().items():
            n = len(gs)
            self.stat[prefix] = np.zeros(n)
            self.count[prefix] = np.zeros(n, dtype=np.int64)
            self.max_radius[prefix] = np.zeros(n)

    def update(self, aux):
        for prefix, d in aux["adc"].items():
            sel = d["sel"]
            self.stat[prefix][sel] += d["stat"]
            self.count[prefix][sel] += d["visible"].astype(np.int64)
            np.maximum.at(self.max_radius[prefix], sel, d["radius"])


def adc_step(model: SceneModel, optim: Adam, stats: AdcStats, cfg: TrainConfig,
             rng: np.random.Generator):
    """Clone/split primitives with large accumulated positional gradients or screen
    footprints, prune transparent and oversized ones, and keep the total under cap."""
    report = {"cloned": 0, "split": 0, "pruned": 0}
    extent = model.scene_scale
    for prefix in list(model.gaussian_sets().keys()):
        gs = model.set_by_prefix(prefix)
        n = len(gs)
        if n == 0:
            continue
        avg = stats.stat[prefix] / np.maximum(stats.count[prefix], 1)
        # background sphere primitives are huge by design: the screen-size splitting
        # criterion targets under-densified close-ups, not the sky shell
        oversized = (stats.max_radius[prefix] > cfg.screen_size_threshold) & ~gs.is_background
        densify = (avg > cfg.densify_grad_threshold) | oversized

        budget = max(cfg.max_primitives - model.total_primitives(), 0)
        cand = np.nonzero(densify)[0]
        if len(cand) > budget:
            order = np.lexsort((cand, -avg[cand]))
            cand = np.sort(cand[order[:budget]])
        chosen = np.zeros(n, dtype=bool)
        chosen[cand] = True

        scales = gs.scales()
        big = scales.max(axis=1) > cfg.percent_dense * extent
        # screen-size offenders always split: shrinking the footprint is the point
        split_mask = chosen & (big | oversized)
        clone_mask = chosen & ~split_mask

        children = []
        if np.any(clone_mask):
            children.append(gs.select(clone_mask))
            report["cloned"] += int(clone_mask.sum())
        if np.any(split_mask):
            parents = gs.select(split_mask)
            k = len(parents)
            R = geo.quat_to_rotmat(parents.unit_quats())
            a = parents.scales()
            for _ in range(2):
                noise = rng.standard_normal((k, 3)).astype(parents.means.dtype)
                offs = np.einsum("nij,nj->ni", R, a * noise)
                child = parents.select(np.ones(k, dtype=bool))
                child.means = (parents.means + offs).astype(parents.means.dtype)
                child.log_scales = parents.log_scales - np.log(cfg.split_scale_shrink)
                children.append(child)
            report["split"] += k

        combined = gs
        n_children = 0
        for ch in children:
            combined = combined.concat(ch)
            n_children += len(ch)

        # pruning on the combined set; split parents are consumed by their children
        drop = np.zeros(len(combined), dtype=bool)
        drop[:n][split_mask] = True
        opac = combined.opacities()
        low = opac < cfg.opacity_prune_threshold
        inside = np.all(
            (combined.means >= model.scene_bounds[0]) & (combined.means <= model.scene_bounds[1]),
            axis=1,
        ) if prefix == "static" else np.zeros(len(combined), dtype=bool)
        too_big = combined.scales().max(axis=1) > cfg.world_size_prune * extent * 2.0
        prune = low | (inside & too_big)
        report["pruned"] += int((prune & ~drop).sum())
        keep = ~(drop | prune)

        model.replace_set(prefix, combined.select(keep))
        for suffix in ("means", "quats", "log_scales", "opacity_logits"):
            name = f"{prefix}.{suffix}"
            optim.rebuild_param(name, keep_mask=None, n_new=n_children)
            optim.rebuild_param(name, keep_mask=keep)
    stats.reset(model)
    return report


def train_step(model: SceneModel, view: TrainView, optim: Adam, stats: AdcStats,
               cfg: TrainConfig, step: int):
    buffers, cache = pl.render_view(
        model, view.sequence, view.time, camera=view.camera,
        threads=cfg.threads, need_grad=True,
    )
    loss_val, g_rgb, g_depth = compute_loss(
        buffers.color, view.image, buffers.depth, view.depth, view.depth_mask, cfg.weights(),
        depth_scale=model.scene_scale,
    )
    if not np.isfinite(loss_val):
        raise TrainingError(f"non-finite loss at step {step} on view {view.name!r}")
    grads, aux = pl.render_backward(
        model, cache,
        g_rgb.astype(buffers.color.dtype),
        None if g_depth is None else g_depth.astype(buffers.color.dtype),
    )
    stats.update(aux)
    optim.step(model.parameters(), grads)
    return {"loss": loss_val, "psnr": psnr(buffers.color, view.image)}


def make_optimizer(model: SceneModel, cfg: TrainConfig) -> Adam:
    return Adam(model.parameters(), cfg.optimizer_groups(model.scene_scale),
                cfg.steps, cfg.beta1, cfg.beta2)


def train(model: SceneModel, views, cfg: TrainConfig, log=None, on_step=None,
          on_adc=None):
    """Full optimization loop with interleaved density control."""
    if not views:
        raise TrainingError("no training views")
    optim = make_optimizer(model, cfg)
    stats = AdcStats(model)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(views))
    pos = 0
    stop = cfg.adc_stop_step()
    history = []
    t_start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        if pos >= len(order):
            order = rng.permutation(len(views))
            pos = 0
        view = views[order[pos]]
        pos += 1
        metrics = train_step(model, view, optim, stats, cfg, step)
        if cfg.adc_warmup < step <= stop and step % cfg.adc_interval == 0:
            report = adc_step(model, optim, stats, cfg, rng)
            if on_adc:
                on_adc(step, report, model)
            if log:
                log(f"step {step}: adc cloned={report['cloned']} split={report['split']} "
                    f"pruned={report['pruned']} total={model.total_primitives()}")
        if log and (step % 250 == 0 or step == 1):
            log(f"step {step}/{cfg.steps} loss={metrics['loss']:.5f} "
                f"psnr={metrics['psnr']:.2f} prims={model.total_primitives()} "
                f"elapsed={time.perf_counter() - t_start:.0f}s")
        history.append(metrics["loss"])
        if on_step:
            on_step(step, metrics)
    return {"optim": optim, "history": history,
            "elapsed": time.perf_counter() - t_start}


def align_camera_poses(model: SceneModel, views, cfg: TrainConfig, steps: int = 200, log=None):
    """Eval-alignment mode: optimize only pose residuals against the given views."""
    groups = cfg.optimizer_groups(model.scene_scale)
    for key, spec in groups.items():
        if key != "poses":
            groups[key] = GroupSpec(0.0)
    optim = Adam(model.parameters(), groups, steps, cfg.beta1, cfg.beta2)
    stats = AdcStats(model)
    rng = np.random.default_rng(cfg.seed)
    for step in range(1, steps + 1):
        view = views[int(rng.integers(len(views)))]
        train_step(model, view, optim, stats, cfg, step)
        if log and step % 50 == 0:
            log(f"pose alignment step {step}/{steps}")
