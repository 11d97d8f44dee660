"""PSNR and SSIM against hand-computed values and a brute-force
sliding-window SSIM oracle."""

import numpy as np
import pytest

from kinfield.metrics import PSNR_CAP, psnr, ssim


def test_psnr_identical_caps():
    img = np.full((8, 8, 3), 0.5)
    assert psnr(img, img) == PSNR_CAP


def test_psnr_known_offset():
    # 26/255 survives 8-bit quantization exactly.
    a = np.zeros((16, 16))
    b = np.full((16, 16), 26.0 / 255.0)
    expect = 10.0 * np.log10(1.0 / (26.0 / 255.0) ** 2)
    assert psnr(a, b) == pytest.approx(expect, abs=1e-9)


def test_psnr_quantization_matters():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.4 / 255.0)       # rounds away to zero
    assert psnr(a, b) == PSNR_CAP
    assert psnr(a, b, quantize=False) < PSNR_CAP


def test_ssim_identical_is_one(rng):
    img = rng.uniform(0.0, 1.0, size=(24, 24))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_decreases_with_noise(rng):
    img = rng.uniform(0.2, 0.8, size=(32, 32))
    light = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    heavy = np.clip(img + rng.normal(0, 0.2, img.shape), 0, 1)
    assert 1.0 > ssim(img, light) > ssim(img, heavy)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((5, 5)))


def test_ssim_small_image_stays_finite(rng):
    a = rng.uniform(size=(8, 8, 3))
    b = rng.uniform(size=(8, 8, 3))
    v = ssim(a, b)
    assert np.isfinite(v) and -1.0 <= v <= 1.0


def _ssim_bruteforce(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct windowed computation over fully interior positions."""
    r = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    kern = np.outer(k, k)
    c1, c2 = k1 ** 2, k2 ** 2
    pad = window // 2
    H, W = a.shape
    vals = []
    for i in range(pad, H - pad):
        for j in range(pad, W - pad):
            wa = a[i - pad:i + pad + 1, j - pad:j + pad + 1]
            wb = b[i - pad:i + pad + 1, j - pad:j + pad + 1]
            mu_a = np.sum(kern * wa)
            mu_b = np.sum(kern * wb)
            var_a = np.sum(kern * wa * wa) - mu_a ** 2
            var_b = np.sum(kern * wb * wb) - mu_b ** 2
            cov = np.sum(kern * wa * wb) - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def test_ssim_matches_bruteforce_oracle(rng):
    a = rng.uniform(0.0, 1.0, size=(20, 20))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0.0, 1.0)
    assert ssim(a, b) == pytest.approx(_ssim_bruteforce(a, b), abs=1e-10)


def test_ssim_multichannel_averages(rng):
    a = rng.uniform(size=(20, 20, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    per = [ssim(a[..., c], b[..., c]) for c in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)
