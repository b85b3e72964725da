"""Image conventions and the two mixing strategies.

An image is a float64 numpy array of shape (H, W, C) with C in {1, 3} and
every value in [0, 1]. Operations that can push values outside the range
clamp before returning; the convex pixel mix cannot, so it does not.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ContractError, ShapeError
from .rng import SmallRng

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def require_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ContractError(f"{name}: expected (H, W, C) with C in {{1, 3}}, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractError(f"{name}: empty spatial extent {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractError(f"{name}: values outside [0, 1]")
    return img.astype(np.float64, copy=False)


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def to_luma(img: np.ndarray) -> np.ndarray:
    """Collapse to a single luminance channel of shape (H, W)."""
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA_WEIGHTS


def mix_pixel(base: np.ndarray, other: np.ndarray, lam: float) -> np.ndarray:
    """Convex per-pixel blend lam * other + (1 - lam) * base.

    lam below 0.5 keeps the majority of every pixel's value from the base
    image, and convexity keeps the result inside [0, 1] with no clamping.
    """
    if base.shape != other.shape:
        raise ShapeError.mismatch("mix_pixel", base.shape, other.shape)
    lam = float(lam)
    if not 0.0 <= lam < 1.0:
        raise ContractError(f"mix_pixel needs lambda in [0, 1), got {lam}")
    return lam * other + (1.0 - lam) * base


def patch_rect(shape: tuple[int, ...], lam: float, seed: int) -> tuple[int, int, int, int]:
    """Seed-drawn rectangle (top, left, height, width) with area ~ lam * H * W.

    Sides are round(sqrt(lam) * H) x round(sqrt(lam) * W), placed uniformly
    over the positions that keep the rectangle fully inside the image.
    """
    h_img, w_img = shape[0], shape[1]
    side = np.sqrt(lam)
    h = int(round(side * h_img))
    w = int(round(side * w_img))
    if h == 0 or w == 0:
        return 0, 0, 0, 0
    rng = SmallRng(seed, "patch")
    top = rng.integers(0, h_img - h + 1)
    left = rng.integers(0, w_img - w + 1)
    return top, left, h, w


def mix_patch(base: np.ndarray, other: np.ndarray, lam: float, seed: int) -> np.ndarray:
    """Copy one rectangle of `other` into `base`, leaving the rest untouched."""
    if base.shape != other.shape:
        raise ShapeError.mismatch("mix_patch", base.shape, other.shape)
    lam = float(lam)
    if not 0.0 < lam < 1.0:
        raise ContractError(f"mix_patch needs lambda in (0, 1), got {lam}")
    top, left, h, w = patch_rect(base.shape, lam, seed)
    if h == 0 or w == 0:
        warnings.warn("mix_patch: rectangle area rounded to zero; returning base unchanged")
        return base.copy()
    out = base.copy()
    out[top:top + h, left:left + w] = other[top:top + h, left:left + w]
    return out
