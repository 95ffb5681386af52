"""Distortion metrics, the MS-SSIM dB transform and the Bjontegaard delta rate.

MS-SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and
2x2 average pooling between scales.  At desk scale it runs on 3 scales with
the first three canonical weights renormalized to sum to one, so values are
comparable only with other 3-scale numbers.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

PSNR_CAP = 99.0
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b) -> float:
    """PSNR on the 8-bit scale of images given in ``[0, 1]``; identical -> 99 dB."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((255.0 * (a - b)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def msssim_db(d: float) -> float:
    """Display transform ``-10 log10(1 - d)`` for an MS-SSIM value ``d``."""
    if d >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - d)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def msssim_weights(levels: int) -> np.ndarray:
    w = MSSSIM_WEIGHTS[:levels]
    return w / w.sum()


def min_msssim_size(levels: int) -> int:
    return 2 ** (levels - 1) * WINDOW


def _blur(x):
    """Valid separable Gaussian filter applied to each plane of ``[M, 1, H, W]``."""
    g = gaussian_window()
    x = ad.conv2d(x, g.reshape(1, 1, WINDOW, 1))
    return ad.conv2d(x, g.reshape(1, 1, 1, WINDOW))


def _ssim_terms(x, y):
    c1, c2 = K1**2, K2**2
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    ssim = (2.0 * mx * my + c1) / (mx * mx + my * my + c1) * cs
    return ssim, cs


def _pool2(x):
    n, c, h, w = x.shape
    x = ad.getitem(x, (slice(None), slice(None), slice(0, h - h % 2), slice(0, w - w % 2)))
    x = ad.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return ad.mean(ad.mean(x, axis=5), axis=3)


def ms_ssim_tensor(a, b, levels: int = 3) -> ad.Tensor:
    """Differentiable MS-SSIM per image for ``[N, C, H, W]`` (or ``[C, H, W]``) inputs."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    single = a.ndim == 3
    if single:
        a, b = ad.reshape(a, (1,) + a.shape), ad.reshape(b, (1,) + b.shape)
    n, c, h, w = a.shape
    need = min_msssim_size(levels)
    if min(h, w) < need:
        raise ValueError(f"MS-SSIM with {levels} scales needs inputs of at least {need}x{need}, got {h}x{w}")
    weights = msssim_weights(levels)
    x = ad.reshape(a, (n * c, 1, h, w))
    y = ad.reshape(b, (n * c, 1, h, w))
    result = None
    for level in range(levels):
        ssim, cs = _ssim_terms(x, y)
        term = ssim if level == levels - 1 else cs
        per_image = ad.mean(ad.reshape(term, (n, -1)), axis=1)
        factor = ad.power(ad.lower_bound(ad.relu(per_image), 1e-12), float(weights[level]))
        result = factor if result is None else result * factor
        if level < levels - 1:
            x, y = _pool2(x), _pool2(y)
    return ad.reshape(result, ()) if single else result


def ms_ssim(a, b, levels: int = 3) -> float | np.ndarray:
    """MS-SSIM score in ``[0, 1]`` (1 = identical)."""
    with ad.no_grad():
        out = ms_ssim_tensor(np.asarray(a, np.float64), np.asarray(b, np.float64), levels).data
    return float(out) if out.ndim == 0 else out


def bd_rate(anchor, test) -> float:
    """Bjontegaard delta rate in percent (negative = ``test`` needs fewer bits).

    Each curve is a sequence of ``(rate, quality)`` pairs with at least four
    points.  Log-rate is fitted as a cubic in quality and the two fits are
    integrated over the common quality interval.
    """
    anchor, test = np.asarray(anchor, np.float64), np.asarray(test, np.float64)
    for name, curve in (("anchor", anchor), ("test", test)):
        if curve.ndim != 2 or curve.shape[1] != 2 or curve.shape[0] < 4:
            raise ValueError(f"{name} curve needs at least 4 (rate, quality) points")
        if np.any(curve[:, 0] <= 0):
            raise ValueError(f"{name} curve has non-positive rates")
    lo = max(anchor[:, 1].min(), test[:, 1].min())
    hi = min(anchor[:, 1].max(), test[:, 1].max())
    if hi <= lo:
        raise ValueError("curves do not overlap in quality")
    ints = []
    for curve in (anchor, test):
        poly = np.polyint(np.polyfit(curve[:, 1], np.log(curve[:, 0]), 3))
        ints.append(np.polyval(poly, hi) - np.polyval(poly, lo))
    avg = (ints[1] - ints[0]) / (hi - lo)
    return float((math.exp(avg) - 1.0) * 100.0)
