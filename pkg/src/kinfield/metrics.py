"""Image quality metrics: PSNR on 8-bit-quantized renders and SSIM with
an 11x11 Gaussian window (sigma 1.5, standard constants)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate

PSNR_CAP = 99.0


def psnr(img, ref, max_value=1.0, quantize=True):
    """Peak signal-to-noise ratio; identical images report the 99 dB cap."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if quantize:
        a = np.clip(np.round(a / max_value * 255.0), 0, 255) / 255.0 * max_value
        b = np.clip(np.round(b / max_value * 255.0), 0, 255) / 255.0 * max_value
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(max_value ** 2 / mse), PSNR_CAP)


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(img, ref, max_value=1.0, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity.  Multichannel images average the
    per-channel scores."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], max_value, window, sigma, k1, k2)
                              for c in range(a.shape[2])]))
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2

    def filt(x):
        return correlate(x, kern, mode="nearest")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    # Crop the window border so padding does not bias the mean; images
    # smaller than the window keep everything.
    pad = window // 2
    smap = num / den
    if smap.shape[0] > 2 * pad and smap.shape[1] > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(np.mean(smap))
