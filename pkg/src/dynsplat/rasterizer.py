"""Tile-based differentiable splatting: projection with Jacobian, depth-sorted alpha
compositing, anti-aliasing compensation, and an analytic backward pass that also
produces camera-pose gradients and densification statistics.

Determinism: fragments are sorted by (tile, depth, primitive index); tiles write
disjoint buffer regions in the forward pass and their gradient contributions are
merged in fixed tile order, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba not installed
    _kernels = None


def _jitted() -> bool:
    return _kernels is not None and not os.environ.get("DYNSPLAT_NO_NUMBA")

TILE_SIZE = 16
BLUR_2D = 0.3  # px^2 low-pass added to screen covariances, sized to cover one pixel
TRANSMITTANCE_EPS = 1e-4  # stop compositing once this little light remains
ALPHA_DEPTH_EPS = 1e-3  # below this accumulated opacity the depth estimate is infinity
_CHUNK = 64  # fragments composited per vectorized block


@dataclass
class FrameBuffers:
    color: np.ndarray  # (H, W, 3), clamped to [0, 1]
    depth: np.ndarray  # (H, W), meters; inf where alpha < ALPHA_DEPTH_EPS
    alpha: np.ndarray  # (H, W) accumulated opacity


def compensation_factor(cov2d: np.ndarray, blur: float = BLUR_2D) -> np.ndarray:
    """sqrt(|Sigma| / |Sigma + b I|) for (..., 2, 2) screen covariances."""
    a = cov2d[..., 0, 0]
    b_ = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    det = a * c - b_ * b_
    det_blur = (a + blur) * (c + blur) - b_ * b_
    det = np.maximum(det, 0.0)
    return np.sqrt(det / np.maximum(det_blur, 1e-30))


def project_gaussians(
    means: np.ndarray,  # (N, 3) world
    covs: np.ndarray,  # (N, 3, 3) world
    world_from_cam,  # RigidTransform
    intr,  # CameraIntrinsics
    near: float = 1.0,
    blur: float = BLUR_2D,
):
    """EWA projection of 3D Gaussians to screen space.

    Returns a projection record over the surviving (non-culled) primitives plus
    the per-input radius/visibility used by density-control bookkeeping.
    """
    dtype = means.dtype
    n = len(means)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))  # forward reads one triangle
    R = world_from_cam.rotation.astype(dtype)  # cam -> world
    t = world_from_cam.translation.astype(dtype)
    x_cam = (means - t) @ R  # (N, 3): R^T (mu - t) row-wise
    z = x_cam[:, 2]
    in_front = z > near

    fx, fy, cx, cy = intr.fx, intr.fy, intr.cx, intr.cy
    W, H = intr.width, intr.height
    zs = np.where(in_front, z, 1.0)
    u = fx * x_cam[:, 0] / zs + cx
    v = fy * x_cam[:, 1] / zs + cy
    means2d = np.stack([u, v], axis=1).astype(dtype)

    # Jacobian of the pinhole projection, with the off-axis ratio clamped so far
    # off-screen primitives cannot blow up the linearization
    lim_x = (1.0 + 0.3) * (0.5 * W / fx)
    lim_y = (1.0 + 0.3) * (0.5 * H / fy)
    rx = x_cam[:, 0] / zs
    ry = x_cam[:, 1] / zs
    crx = np.clip(rx, -lim_x, lim_x)
    cry = np.clip(ry, -lim_y, lim_y)

    cov_cam = np.matmul(R.T[None], np.matmul(covs, R[None]))  # R^T Sigma R
    # J rows are [jx, 0, jbx] and [0, jy, jby]: expand J C J^T explicitly
    jx = fx / zs
    jy = fy / zs
    jbx = -fx * crx / zs
    jby = -fy * cry / zs
    c00, c01, c02 = cov_cam[:, 0, 0], cov_cam[:, 0, 1], cov_cam[:, 0, 2]
    c11, c12, c22 = cov_cam[:, 1, 1], cov_cam[:, 1, 2], cov_cam[:, 2, 2]
    cov2d = np.empty((n, 2, 2), dtype=dtype)
    cov2d[:, 0, 0] = jx * jx * c00 + 2 * jx * jbx * c02 + jbx * jbx * c22
    cov2d[:, 0, 1] = cov2d[:, 1, 0] = jx * jy * c01 + jx * jby * c02 \
        + jbx * jy * c12 + jbx * jby * c22
    cov2d[:, 1, 1] = jy * jy * c11 + 2 * jy * jby * c12 + jby * jby * c22

    a = cov2d[:, 0, 0] + blur
    b_ = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + blur
    det_blur = a * c - b_ * b_
    det_ok = det_blur > 1e-24
    safe_det = np.where(det_ok, det_blur, 1.0)
    conic = np.stack([c / safe_det, -b_ / safe_det, a / safe_det], axis=1)  # (A, B, C)
    comp = compensation_factor(cov2d, blur)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det_blur, 0.01))
    radius = np.ceil(3.0 * np.sqrt(lam_max))

    on_screen = (
        (means2d[:, 0] + radius > 0) & (means2d[:, 0] - radius < W)
        & (means2d[:, 1] + radius > 0) & (means2d[:, 1] - radius < H)
    )
    valid = in_front & det_ok & on_screen
    idx = np.nonzero(valid)[0]

    return {
        "index": idx,  # surviving -> input indices
        "means2d": means2d[idx],
        "conic": conic[idx],
        "comp": comp[idx],
        "depth": z[idx],
        "radius": radius[idx],
        "valid": valid,
        "radius_full": np.where(valid, radius, 0.0),
        # cached intermediates for the backward pass
        "means": means, "covs": covs, "x_cam": x_cam,
        "cov_cam": cov_cam, "cov2d": cov2d, "blur": blur,
        "R": R, "t": t, "intr": intr, "lim": (lim_x, lim_y),
    }


def _tile_pixels(x0, y0, w, h, dtype):
    ys, xs = np.mgrid[y0:y0 + h, x0:x0 + w]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(dtype)


def _build_fragments(proj, width, height, tile):
    """Depth-sorted fragment list per tile. Returns (order, tile_ids, tile_starts)."""
    m2d, radius = proj["means2d"], proj["radius"]
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    x0 = np.clip(np.floor((m2d[:, 0] - radius) / tile), 0, tx_n - 1).astype(np.int64)
    x1 = np.clip(np.floor((m2d[:, 0] + radius) / tile), 0, tx_n - 1).astype(np.int64)
    y0 = np.clip(np.floor((m2d[:, 1] - radius) / tile), 0, ty_n - 1).astype(np.int64)
    y1 = np.clip(np.floor((m2d[:, 1] + radius) / tile), 0, ty_n - 1).astype(np.int64)
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                np.zeros(tx_n * ty_n + 1, np.int64), tx_n)
    frag_gauss = np.repeat(np.arange(len(m2d)), counts)
    # within-gaussian running index -> (dx, dy) offset inside its tile bbox
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    lx = local % np.repeat(nx, counts)
    ly = local // np.repeat(nx, counts)
    tx = np.repeat(x0, counts) + lx
    ty = np.repeat(y0, counts) + ly
    # drop bbox corner tiles the 3-sigma circle cannot touch
    mx = m2d[frag_gauss, 0]
    my = m2d[frag_gauss, 1]
    ddx = np.clip(mx, tx * tile, tx * tile + tile) - mx
    ddy = np.clip(my, ty * tile, ty * tile + tile) - my
    near_tile = ddx * ddx + ddy * ddy <= radius[frag_gauss] ** 2
    frag_gauss = frag_gauss[near_tile]
    tile_id = (ty * tx_n + tx)[near_tile]
    order = np.lexsort((frag_gauss, proj["depth"][frag_gauss], tile_id))
    frag_gauss = frag_gauss[order]
    tile_id = tile_id[order]
    tile_starts = np.searchsorted(tile_id, np.arange(tx_n * ty_n + 1))
    return frag_gauss, tile_id, tile_starts, tx_n


def rasterize_forward(
    proj,
    colors: np.ndarray,  # (N, 3) conditioned colors, indexed like the projection inputs
    opacities: np.ndarray,  # (N,) final opacities
    width: int,
    height: int,
    tile: int = TILE_SIZE,
    threads: int = 1,
    keep_fragments: bool = True,
):
    """Alpha-composite projected Gaussians into color/depth/alpha buffers.

    keep_fragments caches per-tile kernel evaluations for the backward pass;
    disable it for forward-only renders to save memory.
    """
    dtype = proj["means2d"].dtype
    color_buf = np.zeros((height, width, 3), dtype=dtype)
    depth_num = np.zeros((height, width), dtype=dtype)
    alpha_buf = np.zeros((height, width), dtype=dtype)

    frag_gauss, _, tile_starts, tx_n = _build_fragments(proj, width, height, tile)
    src = proj["index"]
    cols = colors[src]
    alphas = opacities[src]

    cache = {
        "proj": proj, "colors": colors, "opacities": opacities,
        "frag_gauss": frag_gauss, "tile_starts": tile_starts, "tx_n": tx_n,
        "width": width, "height": height, "tile": tile, "tiles": {},
    }

    n_tiles = len(tile_starts) - 1

    def run_tile(ti):
        lo, hi = tile_starts[ti], tile_starts[ti + 1]
        if lo == hi:
            return None
        tx, ty = ti % tx_n, ti // tx_n
        x0, y0 = tx * tile, ty * tile
        w = min(tile, width - x0)
        h = min(tile, height - y0)
        px = _tile_pixels(x0, y0, w, h, dtype)  # (P, 2)
        gi = frag_gauss[lo:hi]
        m2d, conic, comp = proj["means2d"][gi], proj["conic"][gi], proj["comp"][gi]
        a_k = alphas[gi]
        c_k = cols[gi]
        z_k = proj["depth"][gi]

        if _jitted():
            n_p = w * h
            acc_rgb = np.zeros((n_p, 3), dtype=dtype)
            acc_d = np.zeros(n_p, dtype=dtype)
            acc_a = np.zeros(n_p, dtype=dtype)
            kern = np.zeros((len(gi), n_p), dtype=dtype)
            _kernels.composite_tile(
                np.ascontiguousarray(m2d), np.ascontiguousarray(conic),
                np.ascontiguousarray(comp), np.ascontiguousarray(a_k),
                np.ascontiguousarray(c_k), np.ascontiguousarray(z_k),
                np.ascontiguousarray(proj["radius"][gi]),
                dtype.type(x0), dtype.type(y0), w, h,
                TRANSMITTANCE_EPS, acc_rgb, acc_d, acc_a, kern,
            )
            store = ("numba", kern if keep_fragments else None)
            return ti, (x0, y0, w, h), acc_rgb, acc_d, acc_a, store

        acc_rgb = np.zeros((px.shape[0], 3), dtype=dtype)
        acc_d = np.zeros(px.shape[0], dtype=dtype)
        acc_a = np.zeros(px.shape[0], dtype=dtype)
        chunks = []
        f = 0
        while f < len(gi):
            g = slice(f, min(f + _CHUNK, len(gi)))
            T0 = 1.0 - acc_a
            if np.max(T0) < TRANSMITTANCE_EPS:
                break
            dx = px[None, :, 0] - m2d[g, 0, None]  # (F, P)
            dy = px[None, :, 1] - m2d[g, 1, None]
            power = -0.5 * (conic[g, 0, None] * dx * dx + conic[g, 2, None] * dy * dy) \
                - conic[g, 1, None] * dx * dy
            kern = np.exp(power)
            w_f = (a_k[g, None] * comp[g, None]) * kern  # (F, P)
            Q = np.cumprod(1.0 - w_f, axis=0)
            T_before = np.empty_like(Q)
            T_before[0] = T0
            T_before[1:] = T0 * Q[:-1]
            contrib = np.where(T_before >= TRANSMITTANCE_EPS, w_f * T_before, 0.0)
            acc_rgb += contrib.T @ c_k[g]
            acc_d += contrib.T @ z_k[g]
            acc_a += contrib.sum(axis=0)
            chunks.append((T0, kern) if keep_fragments else (T0, None))
            f += _CHUNK

        return ti, (x0, y0, w, h), acc_rgb, acc_d, acc_a, ("numpy", chunks)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_tile, range(n_tiles)))
    else:
        results = [run_tile(ti) for ti in range(n_tiles)]

    for res in results:
        if res is None:
            continue
        ti, (x0, y0, w, h), acc_rgb, acc_d, acc_a, chunks = res
        color_buf[y0:y0 + h, x0:x0 + w] = acc_rgb.reshape(h, w, 3)
        depth_num[y0:y0 + h, x0:x0 + w] = acc_d.reshape(h, w)
        alpha_buf[y0:y0 + h, x0:x0 + w] = acc_a.reshape(h, w)
        cache["tiles"][ti] = chunks

    cache["raw_color"] = color_buf
    cache["depth_num"] = depth_num
    cache["alpha"] = alpha_buf
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha_buf >= ALPHA_DEPTH_EPS, depth_num / alpha_buf, np.inf)
    buffers = FrameBuffers(np.clip(color_buf, 0.0, 1.0), depth.astype(dtype), alpha_buf)
    return buffers, cache


def rasterize_backward(
    cache,
    grad_color: np.ndarray,  # (H, W, 3)
    grad_depth: np.ndarray = None,  # (H, W)
    grad_alpha: np.ndarray = None,  # (H, W)
    threads: int = 1,
):
    """Exact reverse-mode gradients of the forward compositing and projection.

    Returns per-input-Gaussian gradients for means/covariances/colors/opacities,
    camera-pose gradients from the accumulated positional gradients, and the
    per-primitive screen-space statistics used by density control.
    """
    if "tiles" not in cache:
        raise ValueError("rasterize_backward requires the forward cache")
    proj = cache["proj"]
    dtype = proj["means2d"].dtype
    width, height, tile = cache["width"], cache["height"], cache["tile"]
    src = proj["index"]
    frag_gauss = cache["frag_gauss"]
    tile_starts = cache["tile_starts"]
    tx_n = cache["tx_n"]
    alphas = cache["opacities"][src]
    cols = cache["colors"][src]

    if grad_color.shape != (height, width, 3):
        raise ValueError("grad_color shape mismatch with forward buffers")

    # clamp backward: no gradient where the composited color saturated out of [0, 1]
    raw = cache["raw_color"]
    grad_color = np.where((raw < 0.0) | (raw > 1.0), 0.0, grad_color)

    alpha_buf = cache["alpha"]
    depth_num = cache["depth_num"]
    depth_ok = alpha_buf >= ALPHA_DEPTH_EPS
    safe_a = np.where(depth_ok, alpha_buf, 1.0)
    if grad_depth is None:
        g_D = np.zeros_like(alpha_buf)
        g_A_depth = np.zeros_like(alpha_buf)
    else:
        g_D = np.where(depth_ok, grad_depth / safe_a, 0.0)
        g_A_depth = np.where(depth_ok, -grad_depth * depth_num / (safe_a * safe_a), 0.0)
    g_A = g_A_depth if grad_alpha is None else g_A_depth + grad_alpha

    m = len(src)
    g_mean2d = np.zeros((m, 2), dtype=dtype)
    g_conic = np.zeros((m, 3), dtype=dtype)
    g_comp = np.zeros(m, dtype=dtype)
    g_alpha_m = np.zeros(m, dtype=dtype)
    g_color_m = np.zeros((m, 3), dtype=dtype)
    g_z = np.zeros(m, dtype=dtype)
    adc_stat = np.zeros(m, dtype=dtype)

    def run_tile(ti):
        lo, hi = tile_starts[ti], tile_starts[ti + 1]
        if lo == hi or ti not in cache["tiles"]:
            return None
        mode, chunk_data = cache["tiles"][ti]
        tx, ty = ti % tx_n, ti // tx_n
        x0, y0 = tx * tile, ty * tile
        w = min(tile, width - x0)
        h = min(tile, height - y0)
        px = _tile_pixels(x0, y0, w, h, dtype)
        gi = frag_gauss[lo:hi]
        m2d, conic, comp = proj["means2d"][gi], proj["conic"][gi], proj["comp"][gi]
        a_k, c_k, z_k = alphas[gi], cols[gi], proj["depth"][gi]

        sl_y, sl_x = slice(y0, y0 + h), slice(x0, x0 + w)
        up_rgb = grad_color[sl_y, sl_x].reshape(-1, 3)  # (P, 3)
        up_D = g_D[sl_y, sl_x].reshape(-1)
        up_A = g_A[sl_y, sl_x].reshape(-1)

        p = px.shape[0]
        t_gm = np.zeros((len(gi), 2), dtype=dtype)
        t_gc = np.zeros((len(gi), 3), dtype=dtype)
        t_gcomp = np.zeros(len(gi), dtype=dtype)
        t_ga = np.zeros(len(gi), dtype=dtype)
        t_gcol = np.zeros((len(gi), 3), dtype=dtype)
        t_gz = np.zeros(len(gi), dtype=dtype)
        t_stat = np.zeros(len(gi), dtype=dtype)

        if mode == "numba":
            m2d_c = np.ascontiguousarray(m2d)
            conic_c = np.ascontiguousarray(conic)
            comp_c = np.ascontiguousarray(comp)
            a_c = np.ascontiguousarray(a_k)
            c_c = np.ascontiguousarray(c_k)
            z_c = np.ascontiguousarray(z_k)
            r_c = np.ascontiguousarray(proj["radius"][gi])
            kern = chunk_data
            if kern is None:  # forward ran without keep_fragments: recompute
                kern = np.zeros((len(gi), p), dtype=dtype)
                scratch = np.zeros((p, 3), dtype=dtype)
                _kernels.composite_tile(
                    m2d_c, conic_c, comp_c, a_c, c_c, z_c, r_c,
                    dtype.type(x0), dtype.type(y0), w, h, TRANSMITTANCE_EPS,
                    scratch, np.zeros(p, dtype=dtype), np.zeros(p, dtype=dtype), kern,
                )
            _kernels.composite_tile_backward(
                m2d_c, conic_c, comp_c, a_c, c_c, z_c, r_c,
                dtype.type(x0), dtype.type(y0), w, h, kern,
                np.ascontiguousarray(up_rgb, dtype=dtype),
                np.ascontiguousarray(up_D, dtype=dtype),
                np.ascontiguousarray(up_A, dtype=dtype),
                dtype.type(width * 0.5), dtype.type(height * 0.5),
                t_gm, t_gc, t_gcomp, t_ga, t_gcol, t_gz, t_stat,
            )
            return gi, t_gm, t_gc, t_gcomp, t_ga, t_gcol, t_gz, t_stat

        S_carry = np.zeros(p, dtype=dtype)  # sum_{j>k} q_j w_j T_j, accumulated in reverse
        n_chunks = len(chunk_data)
        for ci in range(n_chunks - 1, -1, -1):
            g = slice(ci * _CHUNK, min((ci + 1) * _CHUNK, len(gi)))
            T0, kern = chunk_data[ci]
            dx = px[None, :, 0] - m2d[g, 0, None]
            dy = px[None, :, 1] - m2d[g, 1, None]
            if kern is None:
                power = -0.5 * (conic[g, 0, None] * dx * dx + conic[g, 2, None] * dy * dy) \
                    - conic[g, 1, None] * dx * dy
                kern = np.exp(power)
            w_f = (a_k[g, None] * comp[g, None]) * kern
            Q = np.cumprod(1.0 - w_f, axis=0)
            T_before = np.empty_like(Q)
            T_before[0] = T0
            T_before[1:] = T0 * Q[:-1]
            active = T_before >= TRANSMITTANCE_EPS

            # q_k = d(pixel outputs)/d(contribution of fragment k)
            q = c_k[g] @ up_rgb.T + z_k[g, None] * up_D[None, :] + up_A[None, :]  # (F, P)
            qwT = np.where(active, q * w_f * T_before, 0.0)
            # suffix sums: S_k = sum_{j>k} qwT_j (within chunk) + S_carry
            S = np.empty_like(qwT)
            S[-1] = S_carry
            if qwT.shape[0] > 1:
                rev = np.cumsum(qwT[::-1], axis=0)[::-1]
                S[:-1] = rev[1:] + S_carry
            S_carry = S[0] + qwT[0]

            dL_dw = np.where(active, q * T_before - S / np.maximum(1.0 - w_f, 1e-12), 0.0)
            contrib = np.where(active, w_f * T_before, 0.0)

            t_gcol[g] += contrib @ up_rgb
            t_gz[g] += contrib @ up_D
            t_ga[g] += (dL_dw * (comp[g, None] * kern)).sum(axis=1)
            t_gcomp[g] += (dL_dw * (a_k[g, None] * kern)).sum(axis=1)
            dL_dpow = dL_dw * w_f
            gx = dL_dpow * (conic[g, 0, None] * dx + conic[g, 1, None] * dy)
            gy = dL_dpow * (conic[g, 1, None] * dx + conic[g, 2, None] * dy)
            t_gm[g, 0] += gx.sum(axis=1)
            t_gm[g, 1] += gy.sum(axis=1)
            # densification statistic: per-pixel L1 of the positional gradient in
            # half-image units, summed over the pixels the primitive covers
            t_stat[g] += (np.abs(gx) * (width * 0.5) + np.abs(gy) * (height * 0.5)).sum(axis=1)
            t_gc[g, 0] += (dL_dpow * (-0.5 * dx * dx)).sum(axis=1)
            t_gc[g, 1] += (dL_dpow * (-dx * dy)).sum(axis=1)
            t_gc[g, 2] += (dL_dpow * (-0.5 * dy * dy)).sum(axis=1)

        return gi, t_gm, t_gc, t_gcomp, t_ga, t_gcol, t_gz, t_stat

    n_tiles = len(tile_starts) - 1
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_tile, range(n_tiles)))
    else:
        results = [run_tile(ti) for ti in range(n_tiles)]

    results = [r for r in results if r is not None]
    if results:
        gi_all = np.concatenate([r[0] for r in results])
        for slot, target in ((1, g_mean2d), (2, g_conic), (3, g_comp), (4, g_alpha_m),
                             (5, g_color_m), (6, g_z), (7, adc_stat)):
            vals = np.concatenate([r[slot] for r in results])
            if vals.ndim == 1:
                target += np.bincount(gi_all, weights=vals, minlength=m).astype(dtype)
            else:
                for col in range(vals.shape[1]):
                    target[:, col] += np.bincount(
                        gi_all, weights=vals[:, col], minlength=m
                    ).astype(dtype)

    return _projection_backward(
        cache, g_mean2d, g_conic, g_comp, g_z, g_color_m, g_alpha_m, adc_stat
    )


def _projection_backward(cache, g_mean2d, g_conic, g_comp, g_z, g_color_m, g_alpha_m, adc_stat):
    proj = cache["proj"]
    src = proj["index"]
    dtype = proj["means2d"].dtype
    n = len(proj["means"])
    intr = proj["intr"]
    fx, fy = intr.fx, intr.fy
    blur = proj["blur"]

    x_cam = proj["x_cam"][src]
    z = x_cam[:, 2]
    lim_x, lim_y = proj["lim"]
    J = np.zeros((len(src), 2, 3), dtype=dtype)
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * np.clip(x_cam[:, 0] / z, -lim_x, lim_x) / z
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * np.clip(x_cam[:, 1] / z, -lim_y, lim_y) / z
    cov_cam = proj["cov_cam"][src]
    cov2d = proj["cov2d"][src]

    # conic = inv(S), S = cov2d + blur I
    S = cov2d.copy()
    S[:, 0, 0] += blur
    S[:, 1, 1] += blur
    conic_m = np.empty_like(S)
    conic_m[:, 0, 0] = proj["conic"][:, 0]
    conic_m[:, 0, 1] = conic_m[:, 1, 0] = proj["conic"][:, 1]
    conic_m[:, 1, 1] = proj["conic"][:, 2]
    G_inv = np.empty_like(S)
    G_inv[:, 0, 0] = g_conic[:, 0]
    G_inv[:, 0, 1] = G_inv[:, 1, 0] = 0.5 * g_conic[:, 1]
    G_inv[:, 1, 1] = g_conic[:, 2]
    g_S = -conic_m @ G_inv @ conic_m  # dL/dS through the inverse

    # compensation rho = sqrt(det cov2d / det S)
    det2d = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    comp_ok = det2d > 1e-24
    inv2d = np.zeros_like(cov2d)
    safe_det = np.where(comp_ok, det2d, 1.0)
    inv2d[:, 0, 0] = cov2d[:, 1, 1] / safe_det
    inv2d[:, 1, 1] = cov2d[:, 0, 0] / safe_det
    inv2d[:, 0, 1] = inv2d[:, 1, 0] = -cov2d[:, 0, 1] / safe_det
    rho = proj["comp"]
    coeff = np.where(comp_ok, 0.5 * rho * g_comp, 0.0)
    g_cov2d = g_S + coeff[:, None, None] * (inv2d - conic_m)

    # cov2d = J cov_cam J^T
    g_J = 2.0 * g_cov2d @ J @ cov_cam
    g_cov_cam = np.swapaxes(J, 1, 2) @ g_cov2d @ J

    # screen mean: u = fx x/z + cx, v = fy y/z + cy
    g_xcam = np.zeros_like(x_cam)
    g_xcam[:, 0] = g_mean2d[:, 0] * fx / z
    g_xcam[:, 1] = g_mean2d[:, 1] * fy / z
    g_xcam[:, 2] = (-g_mean2d[:, 0] * fx * x_cam[:, 0] - g_mean2d[:, 1] * fy * x_cam[:, 1]) / (z * z)
    g_xcam[:, 2] += g_z  # depth channel

    # J entries: J00 = fx/z, J02 = -fx crx/z, J11 = fy/z, J12 = -fy cry/z  (crx = clip(x/z))
    rx = x_cam[:, 0] / z
    ry = x_cam[:, 1] / z
    in_x = (np.abs(rx) <= lim_x).astype(dtype)
    in_y = (np.abs(ry) <= lim_y).astype(dtype)
    crx = np.clip(rx, -lim_x, lim_x)
    cry = np.clip(ry, -lim_y, lim_y)
    # d(rx)/dx = 1/z, d(rx)/dz = -x/z^2 (inside the clamp), zero outside
    g_xcam[:, 0] += g_J[:, 0, 2] * (-fx / z) * in_x / z
    g_xcam[:, 1] += g_J[:, 1, 2] * (-fy / z) * in_y / z
    g_xcam[:, 2] += (
        g_J[:, 0, 0] * (-fx / (z * z))
        + g_J[:, 1, 1] * (-fy / (z * z))
        + g_J[:, 0, 2] * fx * (crx + in_x * rx) / (z * z)
        + g_J[:, 1, 2] * fy * (cry + in_y * ry) / (z * z)
    )

    R = proj["R"]  # cam -> world
    g_means = np.zeros((n, 3), dtype=dtype)
    g_means[src] = g_xcam @ R.T  # x_cam = R^T (mu - t)
    g_covs = np.zeros((n, 3, 3), dtype=dtype)
    g_covs[src] = np.matmul(R[None], np.matmul(g_cov_cam, R.T[None]))

    # camera pose gradients from the accumulated positional gradients
    g_cam_t = -g_means[src].sum(axis=0)
    rel = proj["means"][src] - proj["t"]
    g_cam_R = -(g_means[src].T @ rel) @ R

    g_colors = np.zeros((n, 3), dtype=dtype)
    g_colors[src] = g_color_m
    g_opacities = np.zeros(n, dtype=dtype)
    g_opacities[src] = g_alpha_m
    stat = np.zeros(n, dtype=dtype)
    stat[src] = adc_stat

    return {
        "means": g_means, "covs": g_covs, "colors": g_colors, "opacities": g_opacities,
        "cam_t": g_cam_t, "cam_R": g_cam_R,
        "adc_stat": stat, "visible": proj["valid"], "radius": proj["radius_full"],
    }
