"""Signed distance fields and two-sided halo weights around mask boundaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .masks import PixelMask, binarize, downsample_mask, edge_set


@dataclass
class SDFField:
    """Signed Euclidean distance (pixels) to the mask boundary.

    Negative inside the mask, positive outside. The boundary lies on pixel
    edges, so the pixels touching it carry +-0.5.
    """

    data: np.ndarray
    degenerate: bool = False


def compute_sdf(M: PixelMask | np.ndarray) -> SDFField:
    data = M.data if isinstance(M, PixelMask) else np.asarray(M)
    inside = binarize(data).astype(bool)
    if inside.all() or not inside.any():
        # one-sided: distance to the frame, as if the boundary lay just outside it
        H, W = inside.shape
        yy, xx = np.mgrid[0:H, 0:W]
        d = np.minimum.reduce([yy, xx, H - 1 - yy, W - 1 - xx]).astype(np.float64) + 0.5
        sign = -1.0 if inside.all() else 1.0
        return SDFField((sign * d).astype(np.float32), degenerate=True)
    d_out = ndimage.distance_transform_edt(~inside)  # outside px -> nearest inside px
    d_in = ndimage.distance_transform_edt(inside)
    sdf = np.where(inside, -(d_in - 0.5), d_out - 0.5)
    return SDFField(sdf.astype(np.float32), degenerate=False)


def sdf_bins(sdf: np.ndarray) -> np.ndarray:
    """Integer 1-px bins; bin b covers [b, b+1) so its centre is b + 0.5."""
    return np.floor(sdf).astype(np.int64)


@dataclass
class HaloWeights:
    pixel: np.ndarray  # [H, W]
    latent: np.ndarray  # [h, w]
    radius_px: int
    radius_latent: int
    empty: bool = False


def latent_radius(radius_px: int, H: int, W: int, h: int, w: int) -> int:
    s = max(H / h, W / w)
    # round half up, as in the usual nearest-integer bracket
    return max(1, int(np.floor(radius_px / s + 0.5)))


def linear_disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return np.clip(1.0 - np.hypot(yy, xx) / radius, 0.0, None)


def _ring(seed: np.ndarray, radius: int) -> np.ndarray:
    ring = signal.convolve2d(seed.astype(np.float64), linear_disk_kernel(radius), mode="same")
    return np.clip(ring, 0.0, 1.0).astype(np.float32)


def boundary_seed(m: np.ndarray, soft_tol: float = 1e-3) -> np.ndarray:
    """Edge set of the binarized mask plus any fractional (soft) pixels."""
    soft = (m > soft_tol) & (m < 1.0 - soft_tol)
    return edge_set(m) | soft


def compute_halo(M: PixelMask | np.ndarray, R_px: int, f: int) -> HaloWeights:
    """Halo band at pixel and latent resolution.

    The seed set (boundary edge set plus soft pixels) is convolved with the
    linear disk kernel ``max(0, 1 - r/R)`` and clamped to [0, 1]. The latent
    band repeats the construction on the area-downsampled mask with radius
    ``max(1, round(R_px / s))``.
    """
    if R_px < 1:
        raise ValueError(f"halo radius must be >= 1, got {R_px}")
    data = M.data if isinstance(M, PixelMask) else np.asarray(M, np.float32)
    H, W = data.shape
    m_lat = downsample_mask(data, f, "area")
    h, w = m_lat.shape
    R_l = latent_radius(R_px, H, W, h, w)
    seed_px = boundary_seed(data)
    seed_lat = boundary_seed(m_lat)
    return HaloWeights(
        pixel=_ring(seed_px, R_px),
        latent=_ring(seed_lat, R_l),
        radius_px=int(R_px),
        radius_latent=R_l,
        empty=not seed_px.any(),
    )

