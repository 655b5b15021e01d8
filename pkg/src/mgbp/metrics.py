"""PSNR and SSIM on BT.609 luminance, plus RMSE and L1.

Images are ``(3, H, W)`` or ``(N, 3, H, W)`` arrays with values in [0, 255].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .perceptual import luminance_bt609
from .tensor import DimensionError, apply_cols, apply_rows, gaussian_weights

PEAK = 255.0


def _pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def luminance(img):
    img = np.asarray(img, dtype=float)
    batched = img if img.ndim == 4 else img[None]
    if batched.ndim != 4:
        raise DimensionError(f"expected (3,H,W) or (N,3,H,W), got {img.shape}")
    return luminance_bt609(batched)[:, 0]


def _crop(y, border):
    if border <= 0:
        return y
    if 2 * border >= min(y.shape[-2:]):
        raise DimensionError(f"border crop {border} leaves nothing of {y.shape[-2:]}")
    return y[..., border:-border, border:-border]


def psnr_y(a, b, border_crop=None, scale=4):
    """PSNR in dB between the luminance of ``a`` and ``b``.

    ``border_crop`` pixels are dropped on every side first; it defaults to
    the scale factor, as is customary for super-resolution. Identical
    inputs give ``inf``.
    """
    a, b = _pair(a, b)
    border = scale if border_crop is None else border_crop
    d = _crop(luminance(a), border) - _crop(luminance(b), border)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


@lru_cache(maxsize=64)
def _valid_filter(n, size, sigma):
    if n < size:
        raise DimensionError(f"image extent {n} is smaller than the SSIM window {size}")
    g = gaussian_weights(size, sigma)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i:i + size] = g
    m.setflags(write=False)
    return m


def ssim_map(ya, yb, window=11, sigma=1.5, k1=0.01, k2=0.03, contrast_structure=False):
    mh = _valid_filter(ya.shape[-2], window, sigma)
    mw = _valid_filter(ya.shape[-1], window, sigma)

    def blur(x):
        return apply_cols(apply_rows(x, mh), mw)

    c1, c2 = (k1 * PEAK) ** 2, (k2 * PEAK) ** 2
    mu_a, mu_b = blur(ya), blur(yb)
    var_a = blur(ya * ya) - mu_a * mu_a
    var_b = blur(yb * yb) - mu_b * mu_b
    cov = blur(ya * yb) - mu_a * mu_b
    if contrast_structure:
        return (2 * cov + c2) / (var_a + var_b + c2)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_y(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, border_crop=0):
    """Mean Gaussian-weighted SSIM of the luminance, dynamic range 255."""
    a, b = _pair(a, b)
    ya, yb = _crop(luminance(a), border_crop), _crop(luminance(b), border_crop)
    return float(np.mean(ssim_map(ya, yb, window, sigma, k1, k2)))


def contrast_structure_y(a, b, window=11, sigma=1.5, k2=0.03, border_crop=0):
    """Mean of the SSIM contrast-structure factor alone.

    Unlike full SSIM it does not depend on the mean intensity, so it is
    unchanged when the same constant is added to both images.
    """
    a, b = _pair(a, b)
    ya, yb = _crop(luminance(a), border_crop), _crop(luminance(b), border_crop)
    return float(np.mean(ssim_map(ya, yb, window, sigma, k2=k2, contrast_structure=True)))


def rmse(a, b):
    a, b = _pair(a, b)
    d = a - b
    return math.sqrt(float(np.mean(d * d)))


def l1(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass
class MetricReport:
    name: str
    psnr_y: float
    ssim_y: float
    rmse: float
    l1: float

    def text(self):
        psnr = "inf" if math.isinf(self.psnr_y) else f"{self.psnr_y:.4f}"
        return (f"{self.name}: psnr_y={psnr} dB ssim_y={self.ssim_y:.6f} "
                f"rmse={self.rmse:.6f} l1={self.l1:.6f}")

    def record(self):
        """JSON line; an infinite PSNR is written as the string ``"inf"``."""
        d = asdict(self)
        if math.isinf(d["psnr_y"]):
            d["psnr_y"] = "inf"
        return json.dumps(d, sort_keys=True)


def evaluate(name, output, reference, scale=4, border_crop=None):
    border = scale if border_crop is None else border_crop
    return MetricReport(
        name=name,
        psnr_y=psnr_y(output, reference, border_crop=border),
        ssim_y=ssim_y(output, reference, border_crop=border),
        rmse=rmse(output, reference),
        l1=l1(output, reference),
    )


def write_reports(reports, text_path=None, jsonl_path=None):
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.writelines(r.text() + "\n" for r in reports)
    if jsonl_path is not None:
        with open(jsonl_path, "w") as fh:
            fh.writelines(r.record() + "\n" for r in reports)
