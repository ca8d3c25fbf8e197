"""Image quality and sharpness metrics used for rendering checks and curation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64)


def _pair(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img_a, img_b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 100."""
    a, b = _pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(img_a, img_b, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM averaged over valid window positions (and channels)."""
    a, b = _pair(img_a, img_b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    k = gaussian_window(window, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = convolve2d(x, k, mode="valid")
        my = convolve2d(y, k, mode="valid")
        sxx = convolve2d(x * x, k, mode="valid") - mx * mx
        syy = convolve2d(y * y, k, mode="valid") - my * my
        sxy = convolve2d(x * y, k, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, np.float64)
    if img.ndim == 3:
        return img[..., :3] @ LUMA
    return img


def laplacian_sharpness(img) -> float:
    """Variance of the 3x3 Laplacian response over interior pixels."""
    g = to_gray(img)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("image must be at least 3x3")
    resp = convolve2d(g, LAPLACIAN, mode="valid")
    return float(np.var(resp))


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float64 in [0, 1] (RGB or grayscale)."""
    import cv2

    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"cannot read image {path}")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        img = img[..., 2::-1] if img.shape[2] >= 3 else img[..., 0]
    return img


def save_image(path, img, bits: int = 8) -> None:
    import cv2

    img = np.clip(np.asarray(img, np.float64), 0, 1)
    if bits == 16:
        out = np.round(img * 65535).astype(np.uint16)
    else:
        out = np.round(img * 255).astype(np.uint8)
    if out.ndim == 3:
        out = out[..., ::-1]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise ValueError(f"cannot write image {path}")
