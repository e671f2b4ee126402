"""Training loss: L1 color + SSIM + masked L2 depth, with image-space gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import ssim_with_gradient


@dataclass
class LossWeights:
    rgb: float = 0.8
    ssim: float = 0.2
    depth: float = 0.05

    def __post_init__(self):
        if self.rgb < 0 or self.ssim < 0 or self.depth < 0:
            raise ValueError("loss weights must be non-negative")


def compute_loss(
    rendered: np.ndarray,  # (H, W, 3) in [0, 1]
    target: np.ndarray,  # (H, W, 3)
    rendered_depth: np.ndarray = None,  # (H, W)
    target_depth: np.ndarray = None,  # (H, W) meters
    depth_mask: np.ndarray = None,  # (H, W) bool, pixels with valid supervision
    weights: LossWeights = None,
    depth_scale: float = 1.0,
):
    """Scalar loss plus gradients w.r.t. the rendered color and depth images.

    The depth term is dropped when no ground truth is given; supervised pixels
    additionally require a finite rendered depth. depth_scale converts metric
    depths into scene-normalized units so the L2 term is balanced against the
    color terms independently of scene size.
    """
    w = weights or LossWeights()
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    rendered = np.asarray(rendered, np.float64)
    target = np.asarray(target, np.float64)

    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    g_rgb = w.rgb * np.sign(diff) / diff.size

    ssim_val, ssim_grad = ssim_with_gradient(rendered, target)
    loss = w.rgb * l1 + w.ssim * (1.0 - ssim_val)
    g_rgb = g_rgb - w.ssim * ssim_grad

    g_depth = None
    if target_depth is not None and rendered_depth is not None and w.depth > 0:
        if rendered_depth.shape != target_depth.shape:
            raise ValueError("depth shapes differ")
        mask = np.ones(target_depth.shape, bool) if depth_mask is None else depth_mask.astype(bool)
        mask = mask & np.isfinite(rendered_depth)
        n = max(int(mask.sum()), 1)
        d = np.where(mask, (rendered_depth - target_depth) / depth_scale, 0.0)
        loss += w.depth * float(np.sum(d * d)) / n
        g_depth = w.depth * 2.0 * d / (n * depth_scale)
    return loss, g_rgb, g_depth
