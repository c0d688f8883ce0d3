"""Photometric ops on HxWx3 uint8 arrays, following PIL's definitions.

None of these touch geometry, so labels pass through unchanged.
"""
from __future__ import annotations

import numpy as np


def _apply_lut(img: np.ndarray, luts) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(3):
        out[..., c] = luts[c][img[..., c]]
    return out


def autocontrast(img: np.ndarray) -> np.ndarray:
    """Stretch each channel so its darkest value maps to 0 and lightest to 255."""
    luts = []
    ramp = np.arange(256, dtype=np.float64)
    for c in range(3):
        lo, hi = int(img[..., c].min()), int(img[..., c].max())
        if hi <= lo:
            luts.append(np.arange(256, dtype=np.uint8))
            continue
        scale = 255.0 / (hi - lo)
        lut = np.trunc(ramp * scale - lo * scale)
        luts.append(np.clip(lut, 0, 255).astype(np.uint8))
    return _apply_lut(img, luts)


def equalize(img: np.ndarray) -> np.ndarray:
    luts = []
    for c in range(3):
        hist = np.bincount(img[..., c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (int(nonzero.sum()) - int(nonzero[-1])) // 255 if len(nonzero) > 1 else 0
        if step == 0:
            luts.append(np.arange(256, dtype=np.uint8))
            continue
        n = step // 2 + np.concatenate([[0], np.cumsum(hist)[:-1]])
        luts.append(np.clip(n // step, 0, 255).astype(np.uint8))
    return _apply_lut(img, luts)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert every sample at or above ``threshold``."""
    ramp = np.arange(256)
    lut = np.where(ramp < threshold, ramp, 255 - ramp).astype(np.uint8)
    return _apply_lut(img, [lut] * 3)


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    bits = int(bits)
    if not 1 <= bits <= 8:
        raise ValueError(f"posterize bits must be in [1, 8], got {bits}")
    mask = np.uint8(~(2 ** (8 - bits) - 1) & 0xFF)
    return img & mask


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    out = degenerate.astype(np.float32) + np.float32(factor) * (
        img.astype(np.float32) - degenerate.astype(np.float32))
    return np.clip(np.trunc(out), 0, 255).astype(np.uint8)


def grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601-2 luma in PIL's fixed-point form, shape HxW."""
    r, g, b = (img[..., c].astype(np.uint32) for c in range(3))
    return ((r * 19595 + g * 38470 + b * 7471 + 0x8000) >> 16).astype(np.uint8)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(np.zeros_like(img), img, factor)


def color(img: np.ndarray, factor: float) -> np.ndarray:
    gray = np.repeat(grayscale(img)[..., None], 3, axis=2)
    return _blend(gray, img, factor)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = int(grayscale(img).mean() + 0.5)
    return _blend(np.full_like(img, mean), img, factor)


def smooth(img: np.ndarray) -> np.ndarray:
    """PIL SMOOTH filter: 3x3 kernel, centre 5, others 1, /13; border copied."""
    out = img.copy()
    if img.shape[0] < 3 or img.shape[1] < 3:
        return out
    f = img.astype(np.int32)
    acc = np.zeros_like(f[1:-1, 1:-1])
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            acc += f[dy:dy + f.shape[0] - 2, dx:dx + f.shape[1] - 2]
    acc += 4 * f[1:-1, 1:-1]
    out[1:-1, 1:-1] = np.clip(np.floor(acc / 13.0 + 0.5), 0, 255).astype(np.uint8)
    return out


def sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(smooth(img), img, factor)


# name -> (function, magnitude range or None)
COLOR_OPS = {
    "AutoContrast": (autocontrast, None),
    "Equalize": (equalize, None),
    "Solarize": (solarize, (0.0, 256.0)),
    "Posterize": (posterize, (4, 8)),
    "Contrast": (contrast, (0.1, 1.9)),
    "Color": (color, (0.1, 1.9)),
    "Brightness": (brightness, (0.1, 1.9)),
    "Sharpness": (sharpness, (0.1, 1.9)),
}
