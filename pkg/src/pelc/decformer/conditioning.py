"""Batched torch versions of the halo construction and latent mask used for conditioning."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..data.fields import linear_disk_kernel, latent_radius

SOFT_TOL = 1e-3


def _as_mask(m: torch.Tensor) -> torch.Tensor:
    if m.dim() == 2:
        return m[None, None]
    if m.dim() == 3:
        return m[:, None]
    return m


def edge_set_t(m: torch.Tensor) -> torch.Tensor:
    """XOR of 3x3 dilation and erosion of the binarized mask, edge-replicated padding."""
    b = (m >= 0.5).to(m.dtype)
    padded = F.pad(b, (1, 1, 1, 1), mode="replicate")
    dil = F.max_pool2d(padded, 3, stride=1)
    ero = -F.max_pool2d(-padded, 3, stride=1)
    return dil - ero


def _ring(seed: torch.Tensor, radius: int) -> torch.Tensor:
    k = torch.as_tensor(linear_disk_kernel(radius), dtype=seed.dtype)[None, None]
    return F.conv2d(seed, k, padding=radius).clamp(0.0, 1.0)


def boundary_seed_t(m: torch.Tensor) -> torch.Tensor:
    soft = ((m > SOFT_TOL) & (m < 1.0 - SOFT_TOL)).to(m.dtype)
    return torch.maximum(edge_set_t(m), soft)


def halo_t(m: torch.Tensor, radius_px: int, f: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(pixel halo [B,1,H,W], latent halo [B,1,h,w], latent mask [B,1,h,w]) for a batch of masks."""
    m = _as_mask(m)
    H, W = m.shape[-2:]
    m_lat = F.avg_pool2d(m, f) if f > 1 else m
    R_l = latent_radius(radius_px, H, W, H // f, W // f)
    return _ring(boundary_seed_t(m), radius_px), _ring(boundary_seed_t(m_lat), R_l), m_lat
