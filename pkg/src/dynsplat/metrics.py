"""Image quality metrics: PSNR and SSIM, the latter with an analytic input gradient."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE), capped at 100 dB for (near-)identical images."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    """Separable window filter restricted to the fully-overlapping interior."""
    half = len(k) // 2
    t = correlate1d(img, k, axis=0, mode="constant")
    t = correlate1d(t, k, axis=1, mode="constant")
    return t[half:-half, half:-half]


def _filter_adjoint(grad, k, shape):
    half = len(k) // 2
    g = np.zeros(shape, dtype=np.float64)
    g[half:-half, half:-half] = grad
    t = correlate1d(g, k, axis=0, mode="constant")  # kernel is symmetric
    return correlate1d(t, k, axis=1, mode="constant")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    return ssim_with_gradient(a, b, data_range)[0]


def ssim_with_gradient(a: np.ndarray, b: np.ndarray, data_range: float = 1.0):
    """Mean local SSIM over an 11x11 Gaussian window plus d(ssim)/d(a).

    Accepts (H, W) or (H, W, C); the score averages over channels.
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    single = a.ndim == 2
    if single:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    grad = np.zeros_like(a)
    total = 0.0
    n_ch = a.shape[2]
    for ch in range(n_ch):
        x, y = a[..., ch], b[..., ch]
        u = _filter_valid(x, k)
        v = _filter_valid(y, k)
        p = _filter_valid(x * x, k)
        q = _filter_valid(y * y, k)
        r = _filter_valid(x * y, k)
        sx = p - u * u
        sy = q - v * v
        sxy = r - u * v
        a1 = 2 * u * v + c1
        a2 = 2 * sxy + c2
        b1 = u * u + v * v + c1
        b2 = sx + sy + c2
        smap = (a1 * a2) / (b1 * b2)
        total += float(np.mean(smap))
        # d(mean smap)/d{u, p, r}, then adjoint filtering back to x
        n = smap.size * n_ch
        gs = 1.0 / n
        inv = gs / (b1 * b2)
        g_u = inv * (2 * v * a2 + a1 * (-2 * v)) - gs * smap * (2 * u / b1 - 2 * u / b2)
        g_p = -gs * smap / b2
        g_r = inv * (2 * a1)
        gx = _filter_adjoint(g_u, k, x.shape)
        gx += 2 * x * _filter_adjoint(g_p, k, x.shape)
        gx += y * _filter_adjoint(g_r, k, x.shape)
        grad[..., ch] = gx
    if single:
        grad = grad[..., 0]
    return total / n_ch, grad
