"""Plenoptic render path f(P, K, t, s): graph evaluation, per-primitive conditioning,
world-space composition, one rasterizer call, and the backward orchestration that
pushes image gradients down to every model parameter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import rasterizer as ras
from .model import SceneModel

STAGES = ("graph", "composition", "projection", "fields", "rasterization")


@dataclass
class ComposedScene:
    """Flattened arrays over all active primitives, ready for projection."""

    means: np.ndarray  # (M, 3) world, post-deformation and post-transform
    covs: np.ndarray  # (M, 3, 3) world
    colors: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,) final alpha (attenuated for static primitives)
    groups: list = field(default_factory=list)  # per-source records for backward
    timings: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.means)


def _frustum_keep(means, radius_w, pose, intr, near):
    """Conservative pre-cull so out-of-view primitives skip the field queries."""
    R = pose.rotation.astype(means.dtype)
    t = pose.translation.astype(means.dtype)
    x = (means - t) @ R
    z = x[:, 2]
    tan_x = max(intr.cx, intr.width - intr.cx) / intr.fx + 0.05
    tan_y = max(intr.cy, intr.height - intr.cy) / intr.fy + 0.05
    keep = (z > near) \
        & (np.abs(x[:, 0]) <= z * tan_x + radius_w) \
        & (np.abs(x[:, 1]) <= z * tan_y + radius_w)
    return np.nonzero(keep)[0]


def compose_scene(
    model: SceneModel,
    s: str,
    t: float,
    camera_pose: geo.RigidTransform,
    intr,
    need_grad: bool = False,
    show_objects: bool = True,
    show_background: bool = True,
    attenuation: bool = True,
) -> ComposedScene:
    dtype = model.config.np_dtype
    cfg = model.config
    cam_center = camera_pose.translation.astype(dtype)
    timings = {k: 0.0 for k in STAGES}

    t0 = time.perf_counter()
    omega = model.graph.sequence_latent(s, t)
    active = model.graph.active_objects(s, t) if show_objects else []
    active = [o for o in active if (s, o.object_id) in model.objects]

    gs = model.static
    radius_w = 3.0 * np.exp(np.max(gs.log_scales, axis=1)) if len(gs) else np.zeros(0, dtype)
    sel = _frustum_keep(gs.means, radius_w, camera_pose, intr, cfg.near) if len(gs) else np.arange(0)
    if not show_background and len(sel):
        sel = sel[~gs.is_background[sel]]
    timings["graph"] += time.perf_counter() - t0

    parts = {"means": [], "covs": [], "colors": [], "opacities": []}
    groups = []

    # static scaffold (plus generated background primitives)
    t0 = time.perf_counter()
    mu_w = gs.means[sel]
    alpha_act = gs.opacities()[sel]
    mu_norm = model.normalize_positions(mu_w)
    view_v = mu_w - cam_center
    dirs = geo.normalize_rows(view_v)
    timings["composition"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    nu, colors_s, fcache = model.fields.static.evaluate(
        mu_norm, dirs, alpha_act, omega, need_grad=need_grad
    )
    timings["fields"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    q_unit = geo.quat_normalize(gs.quats[sel])
    scales = np.exp(gs.log_scales[sel])
    covs_s = geo.build_covariance(q_unit, scales)
    final_alpha = nu * alpha_act if attenuation else alpha_act
    parts["means"].append(mu_w)
    parts["covs"].append(covs_s)
    parts["colors"].append(colors_s)
    parts["opacities"].append(final_alpha)
    groups.append({
        "kind": "static", "sel": sel, "cache": fcache, "alpha_act": alpha_act,
        "nu": nu, "q_unit": q_unit, "scales": scales, "view_v": view_v,
        "attenuation": attenuation, "count": len(sel),
    })
    timings["composition"] += time.perf_counter() - t0

    for node in active:
        og = model.objects[(s, node.object_id)]
        if len(og) == 0:
            continue
        t0 = time.perf_counter()
        world, chain = model.graph.resolve_world_from_object(s, node.object_id, t)
        code, gamma = model.graph.object_latent(s, node.object_id, t)
        R_w = world.rotation.astype(dtype)
        t_w = world.translation.astype(dtype)
        q_w = geo.rotmat_to_quat(world.rotation).astype(dtype)
        timings["graph"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        mu_c = og.means
        half = (node.dims.astype(dtype) / 2.0)
        mu_unit = mu_c / half
        mu_w_pre = mu_c @ R_w.T + t_w
        view_v = mu_w_pre - cam_center
        d_world = geo.normalize_rows(view_v)
        d_obj = d_world @ R_w  # rotate into the object's canonical frame
        timings["composition"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        fobj = model.fields.field_for(node.rigid)
        colors_o, delta, ocache = fobj.evaluate(
            mu_unit, d_obj, omega, code, gamma, rigid=node.rigid, need_grad=need_grad
        )
        timings["fields"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        mu_ct = mu_c + delta
        mu_wo = mu_ct @ R_w.T + t_w
        q_unit_o = geo.quat_normalize(og.quats)
        q_world = geo.quat_multiply(q_w, q_unit_o)
        scales_o = np.exp(og.log_scales)
        covs_o = geo.build_covariance(q_world, scales_o)
        parts["means"].append(mu_wo)
        parts["covs"].append(covs_o)
        parts["colors"].append(colors_o)
        parts["opacities"].append(og.opacities())
        groups.append({
            "kind": "object", "key": (s, node.object_id), "rigid": node.rigid,
            "chain": chain, "cache": ocache, "half": half, "R_w": R_w, "q_w": q_w,
            "q_unit": q_unit_o, "q_world": q_world, "scales": scales_o,
            "mu_ct": mu_ct, "view_v": view_v, "d_world": d_world,
            "count": len(og),
        })
        timings["composition"] += time.perf_counter() - t0

    if parts["means"]:
        means = np.concatenate(parts["means"]).astype(dtype, copy=False)
        covs = np.concatenate(parts["covs"]).astype(dtype, copy=False)
        colors = np.concatenate(parts["colors"]).astype(dtype, copy=False)
        opac = np.concatenate(parts["opacities"]).astype(dtype, copy=False)
    else:
        means = np.zeros((0, 3), dtype)
        covs = np.zeros((0, 3, 3), dtype)
        colors = np.zeros((0, 3), dtype)
        opac = np.zeros(0, dtype)
    return ComposedScene(means, covs, colors, opac, groups, timings)


def render_view(
    model: SceneModel,
    s: str,
    t: float,
    camera: str = None,
    pose: geo.RigidTransform = None,
    intr=None,
    threads: int = 1,
    need_grad: bool = False,
    show_objects: bool = True,
    show_background: bool = True,
    attenuation: bool = True,
):
    """Render sequence s at time t; returns (FrameBuffers, cache with timings)."""
    chain = None
    if camera is not None:
        pose, intr, chain = model.graph.resolve_camera(s, camera, t)
    elif pose is None or intr is None:
        raise ValueError("render_view needs a camera id or an explicit (pose, intrinsics)")

    composed = compose_scene(
        model, s, t, pose, intr, need_grad=need_grad,
        show_objects=show_objects, show_background=show_background, attenuation=attenuation,
    )
    timings = composed.timings

    t0 = time.perf_counter()
    proj = ras.project_gaussians(
        composed.means, composed.covs, pose, intr,
        near=model.config.near, blur=model.config.blur_2d,
    )
    timings["projection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    buffers, rcache = ras.rasterize_forward(
        proj, composed.colors, composed.opacities,
        intr.width, intr.height, tile=model.config.tile, threads=threads,
        keep_fragments=need_grad,
    )
    timings["rasterization"] = time.perf_counter() - t0

    cache = {
        "composed": composed, "raster": rcache, "chain": chain, "s": s, "t": t,
        "pose": pose, "intr": intr, "timings": timings, "threads": threads,
    }
    return buffers, cache


def render_backward(model: SceneModel, cache, grad_color, grad_depth=None, grad_alpha=None):
    """Backpropagate image-space gradients to every parameter.

    Returns (grads: flat name -> array, aux) where aux carries the per-set
    density-control statistics and visibility bookkeeping.
    """
    composed: ComposedScene = cache["composed"]
    s, t = cache["s"], cache["t"]
    threads = cache.get("threads", 1)
    g = ras.rasterize_backward(cache["raster"], grad_color, grad_depth, grad_alpha,
                               threads=threads)
    grads = model.zero_grads()
    aux = {"adc": {}}
    scale = np.asarray(model.scene_scale, dtype=grad_color.dtype)
    omega_grad_total = np.zeros(model.config.code_dim, dtype=np.float64)
    ego_pose_grads = np.zeros_like(model.graph.sequence(s).ego_residuals)

    offset = 0
    for grp in composed.groups:
        n = grp["count"]
        sl = slice(offset, offset + n)
        g_means = g["means"][sl]
        g_covs = g["covs"][sl]
        g_colors = g["colors"][sl]
        g_opac = g["opacities"][sl]
        offset += n

        if grp["kind"] == "static":
            sel = grp["sel"]
            prefix = "static"
            if grp["attenuation"]:
                grad_nu = g_opac * grp["alpha_act"]
                grad_alpha_act = g_opac * grp["nu"]
            else:
                grad_nu = np.zeros_like(g_opac)
                grad_alpha_act = g_opac
            fg = model.fields.static.backward(grp["cache"], grad_nu, g_colors)
            grad_alpha_act = grad_alpha_act + fg["alpha_base"]
            # position paths: splat mean + field query + viewing direction
            # sel indices are unique, so fancy-indexed += accumulates correctly
            g_mu = g_means + fg["mu_norm"] / scale
            g_mu = g_mu + geo.normalize_rows_backward(grp["view_v"], fg["dirs"])
            grads[f"{prefix}.means"][sel] += g_mu
            a_act = grp["alpha_act"]
            grads[f"{prefix}.opacity_logits"][sel] += grad_alpha_act * a_act * (1.0 - a_act)
            g_q_unit, g_scales = geo.build_covariance_backward(grp["q_unit"], grp["scales"], g_covs)
            grads[f"{prefix}.quats"][sel] += geo.quat_normalize_backward(
                model.static.quats[sel], g_q_unit)
            grads[f"{prefix}.log_scales"][sel] += g_scales * grp["scales"]
            _merge_field_grads(grads, "phi", fg, has_atten=True)
            omega_grad_total += fg["omega"]
            stat_sel = g["adc_stat"][sl]
            aux["adc"][prefix] = {
                "sel": sel, "stat": stat_sel,
                "radius": g["radius"][sl], "visible": g["visible"][sl],
            }
        else:
            key = grp["key"]
            prefix = f"object.{key[0]}.{key[1]}"
            fname = "psi_r" if grp["rigid"] else "psi_n"
            fobj = model.fields.field_for(grp["rigid"])
            grad_delta = g_means @ grp["R_w"]  # dL/d(mu_c + delta) in canonical frame
            fg = fobj.backward(grp["cache"], g_colors, grad_delta)
            g_mu_c = grad_delta + fg["mu_unit"] / grp["half"]
            g_vw = geo.normalize_rows_backward(grp["view_v"], fg["dirs"] @ grp["R_w"].T)
            g_mu_c = g_mu_c + g_vw @ grp["R_w"]
            grads[f"{prefix}.means"] += g_mu_c
            og = model.object_set(*key)
            a_act = og.opacities()
            grads[f"{prefix}.opacity_logits"] += g_opac * a_act * (1.0 - a_act)
            g_q_world, g_scales = geo.build_covariance_backward(
                grp["q_world"], grp["scales"], g_covs
            )
            L = geo.quat_left_matrix(grp["q_w"]).astype(g_q_world.dtype)
            g_q_unit = g_q_world @ L
            grads[f"{prefix}.quats"] += geo.quat_normalize_backward(og.quats, g_q_unit)
            grads[f"{prefix}.log_scales"] += g_scales * grp["scales"]
            _merge_field_grads(grads, fname, fg, has_atten=False)
            omega_grad_total += fg["omega"]
            # object pose gradients chained through the composed world means
            gR_w = g_means.T @ grp["mu_ct"]
            gt_w = g_means.sum(axis=0)
            g_parent, g_child = grp["chain"].backward(gR_w.astype(np.float64),
                                                      gt_w.astype(np.float64))
            from .scenegraph import scatter_bracket
            scatter_bracket(ego_pose_grads, grp["chain"].parent.bracket, g_parent)
            scatter_bracket(grads[f"pose.obj.{key[0]}.{key[1]}"],
                            grp["chain"].child.bracket, g_child)
            aux["adc"][prefix] = {
                "sel": np.arange(n), "stat": g["adc_stat"][sl],
                "radius": g["radius"][sl], "visible": g["visible"][sl],
            }

    # camera pose gradients (positional-gradient approximation from the rasterizer)
    chain = cache["chain"]
    if chain is not None:
        g_parent, g_child = chain.backward(g["cam_R"].astype(np.float64),
                                           g["cam_t"].astype(np.float64))
        from .scenegraph import scatter_bracket
        scatter_bracket(ego_pose_grads, chain.parent.bracket, g_parent)
        grads[f"pose.cam.{s}.{chain.child_key[1]}"] += g_child
    grads[f"pose.ego.{s}"] += ego_pose_grads

    dA, dG = model.graph.sequence_latent_backward(s, t, omega_grad_total)
    grads[f"seq.{s}.appearance"] += dA.astype(grads[f"seq.{s}.appearance"].dtype)
    grads[f"seq.{s}.geometry"] += dG.astype(grads[f"seq.{s}.geometry"].dtype)
    return grads, aux


def _merge_field_grads(grads, fname, fg, has_atten):
    for lv, gt in enumerate(fg["tables"]):
        grads[f"{fname}.table.{lv}"] += gt
    for i, (dW, db) in enumerate(fg["color"]):
        grads[f"{fname}.color.W{i}"] += dW
        grads[f"{fname}.color.b{i}"] += db
    head = "atten" if has_atten else "deform"
    for i, (dW, db) in enumerate(fg[head]):
        grads[f"{fname}.{head}.W{i}"] += dW
        grads[f"{fname}.{head}.b{i}"] += db
