"""Class-preserving augmentation registry.

Seven transform kinds with the torchvision-style parameter ranges used for
support/query synthesis. Each application is a pure function of
(image, spec, seed): the seed feeds one PCG64 stream per call and every
random decision is drawn from it in a fixed order. Crop, rotation, and
shear resample with bilinear interpolation and zero fill outside the
source image; outputs keep the input's height, width, and channel count
and are clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ContractError
from .image import clamp01, require_image, to_luma
from .rng import SmallRng, derive

KINDS = (
    "resized_crop",
    "rotation",
    "hflip",
    "grayscale",
    "color_jitter",
    "gaussian_blur",
    "affine_shear",
)

# widest admissible parameter ranges, matching the published recipe
DEFAULT_PARAMS = {
    "resized_crop": {"scale": (0.2, 0.8), "ratio": (0.75, 1.33)},
    "rotation": {"degrees": 60.0},
    "hflip": {},
    "grayscale": {},
    "color_jitter": {"brightness": 0.2, "contrast": 0.2, "saturation": 0.2, "hue": 0.2},
    "gaussian_blur": {"kernel": 3, "sigma": (0.1, 2.0)},
    "affine_shear": {"shear": 45.0},
}


@dataclass(frozen=True)
class AugSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown augmentation kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        _validate_params(self.kind, merged)


def _validate_params(kind: str, p: dict) -> None:
    bounds = DEFAULT_PARAMS[kind]
    if set(p) != set(bounds):
        raise ContractError(f"{kind}: unexpected parameter keys {sorted(p)}")
    if kind == "resized_crop":
        lo, hi = p["scale"]
        if not (bounds["scale"][0] <= lo < hi <= bounds["scale"][1]):
            raise ContractError(f"resized_crop scale {p['scale']} outside {bounds['scale']}")
        lo, hi = p["ratio"]
        if not (bounds["ratio"][0] <= lo <= hi <= bounds["ratio"][1]):
            raise ContractError(f"resized_crop ratio {p['ratio']} outside {bounds['ratio']}")
    elif kind == "rotation":
        if not 0 < p["degrees"] <= bounds["degrees"]:
            raise ContractError(f"rotation degrees {p['degrees']} outside (0, {bounds['degrees']}]")
    elif kind == "color_jitter":
        for key in ("brightness", "contrast", "saturation", "hue"):
            if not 0 <= p[key] <= bounds[key]:
                raise ContractError(f"color_jitter {key} {p[key]} outside [0, {bounds[key]}]")
    elif kind == "gaussian_blur":
        if p["kernel"] != bounds["kernel"]:
            raise ContractError(f"gaussian_blur kernel must be {bounds['kernel']}")
        lo, hi = p["sigma"]
        if not (bounds["sigma"][0] <= lo < hi <= bounds["sigma"][1]):
            raise ContractError(f"gaussian_blur sigma {p['sigma']} outside {bounds['sigma']}")
    elif kind == "affine_shear":
        if not 0 < p["shear"] <= bounds["shear"]:
            raise ContractError(f"affine_shear {p['shear']} outside (0, {bounds['shear']}]")


def default_specs() -> list[AugSpec]:
    return [AugSpec(kind) for kind in KINDS]


def sample_augmentations(count: int, seed: int) -> list[AugSpec]:
    """Draw `count` distinct kinds uniformly without replacement."""
    if not 1 <= count <= len(KINDS):
        raise ContractError(f"count must be in [1, {len(KINDS)}], got {count}")
    picks = SmallRng(seed, "kinds").distinct(len(KINDS), count)
    return [AugSpec(KINDS[i]) for i in picks]


def apply_augmentation(img: np.ndarray, spec: AugSpec, seed: int) -> np.ndarray:
    img = require_image(img)
    rng = SmallRng(seed, "draws")
    out = _DISPATCH[spec.kind](img, spec.params, rng)
    return clamp01(out)


def apply_pipeline(img: np.ndarray, specs: list[AugSpec], seed: int) -> np.ndarray:
    """Apply specs in order, one derived seed per stage."""
    for i, spec in enumerate(specs):
        img = apply_augmentation(img, spec, derive(seed, "stage", i, spec.kind))
    return img


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img at float (row, col) coords; zero outside the image."""
    h, w, c = img.shape
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy1 = ys - y0
    wx1 = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    vy0 = (y0 >= 0) & (y0 < h)
    vy1 = (y1 >= 0) & (y1 < h)
    vx0 = (x0 >= 0) & (x0 < w)
    vx1 = (x1 >= 0) & (x1 < w)
    np.clip(y0, 0, h - 1, out=y0)
    np.clip(y1, 0, h - 1, out=y1)
    np.clip(x0, 0, w - 1, out=x0)
    np.clip(x1, 0, w - 1, out=x1)
    flat = img.reshape(h * w, c)
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    return (
        (wy0 * wx0 * (vy0 & vx0))[..., None] * flat[y0 * w + x0]
        + (wy0 * wx1 * (vy0 & vx1))[..., None] * flat[y0 * w + x1]
        + (wy1 * wx0 * (vy1 & vx0))[..., None] * flat[y1 * w + x0]
        + (wy1 * wx1 * (vy1 & vx1))[..., None] * flat[y1 * w + x1]
    )


def _inverse_map(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Resample through a 2x2 inverse matrix acting on centered (row, col)."""
    h, w, _ = img.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h) - cr, np.arange(w) - cc, indexing="ij")
    ys = inv[0, 0] * rows + inv[0, 1] * cols + cr
    xs = inv[1, 0] * rows + inv[1, 1] * cols + cc
    return _bilinear_sample(img, ys, xs)


def rotation_matrix(angle_deg: float) -> np.ndarray:
    """Content rotation matrix on (row, col) offsets from the image center."""
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _aug_rotation(img, p, rng):
    angle = rng.uniform(-p["degrees"], p["degrees"])
    return _inverse_map(img, rotation_matrix(-angle))


def _aug_affine_shear(img, p, rng):
    lim = p["shear"]
    for _ in range(100):
        sy = math.tan(math.radians(rng.uniform(-lim, lim)))
        sx = math.tan(math.radians(rng.uniform(-lim, lim)))
        det = 1.0 - sx * sy
        if abs(det) >= 0.05:
            break
    else:
        raise ContractError("affine_shear: could not draw a well-conditioned shear")
    fwd = np.array([[1.0, sy], [sx, 1.0]])
    inv = np.array([[1.0, -sy], [-sx, 1.0]]) / det
    del fwd
    return _inverse_map(img, inv)


def _aug_hflip(img, p, rng):
    return img[:, ::-1].copy()


def _aug_grayscale(img, p, rng):
    if img.shape[2] != 3:
        raise ContractError(f"grayscale needs a 3-channel source, got {img.shape[2]}")
    luma = to_luma(img)
    return np.repeat(luma[:, :, None], 3, axis=2)


def _aug_gaussian_blur(img, p, rng):
    sigma = rng.uniform(*p["sigma"])
    r = p["kernel"] // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    h, w, _ = img.shape
    pad = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="reflect")
    img = sum(k[i] * pad[i:i + h] for i in range(2 * r + 1))
    pad = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(k[i] * pad[:, i:i + w] for i in range(2 * r + 1))


def _aug_resized_crop(img, p, rng):
    h, w, _ = img.shape
    area = h * w
    log_ratio = (math.log(p["ratio"][0]), math.log(p["ratio"][1]))
    for _ in range(10):
        target = area * rng.uniform(*p["scale"])
        ar = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return _resize_region(img, top, left, ch, cw)
    # fallback: centered crop clamped to the nearest admissible ratio
    in_ratio = w / h
    if in_ratio < p["ratio"][0]:
        cw, ch = w, min(h, int(round(w / p["ratio"][0])))
    elif in_ratio > p["ratio"][1]:
        ch, cw = h, min(w, int(round(h * p["ratio"][1])))
    else:
        cw, ch = w, h
    return _resize_region(img, (h - ch) // 2, (w - cw) // 2, ch, cw)


def _resize_region(img, top, left, ch, cw):
    """Bilinearly resize the (ch, cw) region back to the full frame."""
    h, w, _ = img.shape
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, yy, xx)


def _aug_color_jitter(img, p, rng):
    b = rng.uniform(max(0.0, 1.0 - p["brightness"]), 1.0 + p["brightness"])
    c = rng.uniform(max(0.0, 1.0 - p["contrast"]), 1.0 + p["contrast"])
    s = rng.uniform(max(0.0, 1.0 - p["saturation"]), 1.0 + p["saturation"])
    hshift = rng.uniform(-p["hue"], p["hue"])
    img = clamp01(img * b)
    img = clamp01(c * img + (1.0 - c) * to_luma(img).mean())
    if img.shape[2] == 3:
        gray = to_luma(img)[:, :, None]
        img = clamp01(s * img + (1.0 - s) * gray)
        hsv = rgb_to_hsv(img)
        hsv[:, :, 0] = (hsv[:, :, 0] + hshift) % 1.0
        img = hsv_to_rgb(hsv)
    return img


_DISPATCH = {
    "resized_crop": _aug_resized_crop,
    "rotation": _aug_rotation,
    "hflip": _aug_hflip,
    "grayscale": _aug_grayscale,
    "color_jitter": _aug_color_jitter,
    "gaussian_blur": _aug_gaussian_blur,
    "affine_shear": _aug_affine_shear,
}
