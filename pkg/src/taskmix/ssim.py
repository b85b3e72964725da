"""Windowed structural similarity and the two-source query diagnostic.

The per-window index is the simplified product form

    ((2*mu_x*mu_y + c1) * (2*cov_xy + c2)) /
    ((mu_x^2 + mu_y^2 + c1) * (var_x + var_y + c2))

with the cross/auto statistics taken as Gaussian-weighted moments over an
odd square window, evaluated at every fully-interior position and averaged.
RGB input is collapsed to luminance first. Constants default to the
canonical (0.01)^2 and (0.03)^2 on a unit dynamic range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .image import require_image, to_luma


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ContractError(f"window must be odd and >= 3, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ContractError("stability constants must be positive")
        if self.sigma <= 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")


def gaussian_window(n: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian weights of side n."""
    half = (n - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(n) - half) / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x: np.ndarray, y: np.ndarray, cfg: SsimConfig | None = None) -> float:
    cfg = cfg or SsimConfig()
    x = require_image(x, "x")
    y = require_image(y, "y")
    if x.shape != y.shape:
        raise ShapeError.mismatch("ssim", x.shape, y.shape)
    n = cfg.window
    if x.shape[0] < n or x.shape[1] < n:
        raise ContractError(f"image {x.shape[:2]} smaller than {n}x{n} window")
    xl = to_luma(x)
    yl = to_luma(y)
    kern = gaussian_window(n, cfg.sigma)
    wx = sliding_window_view(xl, (n, n))
    wy = sliding_window_view(yl, (n, n))
    mx = np.einsum("ijkl,kl->ij", wx, kern)
    my = np.einsum("ijkl,kl->ij", wy, kern)
    xx = np.einsum("ijkl,kl->ij", wx * wx, kern)
    yy = np.einsum("ijkl,kl->ij", wy * wy, kern)
    xy = np.einsum("ijkl,kl->ij", wx * wy, kern)
    vx = xx - mx * mx
    vy = yy - my * my
    cov = xy - mx * my
    num = (2.0 * mx * my + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return float(np.mean(num / den))


def mssim_query(support_aug: np.ndarray, random_src: np.ndarray,
                query: np.ndarray, cfg: SsimConfig | None = None) -> float:
    """Mean similarity of a mixed query to its two generating sources."""
    if support_aug.shape != query.shape or random_src.shape != query.shape:
        raise ShapeError.mismatch("mssim_query", support_aug.shape, query.shape)
    return 0.5 * (ssim(support_aug, query, cfg) + ssim(random_src, query, cfg))
