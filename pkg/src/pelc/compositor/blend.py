"""Pixel compositing, heuristic latent blending and the closed-form (alpha, shift) projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

DEGENERATE_TOL = 1e-6
PROJECTION_EPS = 1e-8


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def _mask_4d(M, like: torch.Tensor) -> torch.Tensor:
    """Mask as [B or 1, 1, H, W] in the dtype of ``like``."""
    m = _t(getattr(M, "data", M)).to(like.dtype)
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m[:, None]
    return m


def compose_pixels(x_a, x_b, M):
    """``(1 - M) * x_A + M * x_B`` with the mask broadcast over colour channels."""
    x_a, x_b = _t(x_a), _t(x_b)
    if x_a.shape != x_b.shape:
        raise ValueError(f"image shapes differ: {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    m = _mask_4d(M, x_a)
    if m.shape[-2:] != x_a.shape[-2:]:
        raise ValueError(f"mask {tuple(m.shape[-2:])} does not match image {tuple(x_a.shape[-2:])}")
    if x_a.dim() == 3:
        m = m[0]
    return (1 - m) * x_a + m * x_b


def _bilinear_matrix(n_in: int, f: int, dtype) -> torch.Tensor:
    n_out = n_in // f
    src = (torch.arange(n_out, dtype=torch.float64) + 0.5) * f - 0.5
    lo = src.floor().long().clamp(0, n_in - 1)
    hi = (lo + 1).clamp(0, n_in - 1)
    frac = src - src.floor()
    A = torch.zeros(n_out, n_in, dtype=torch.float64)
    A.index_put_((torch.arange(n_out), lo), 1 - frac, accumulate=True)
    A.index_put_((torch.arange(n_out), hi), frac, accumulate=True)
    return A.to(dtype)


def downsample_mask_t(m: torch.Tensor, f: int, method: str = "area") -> torch.Tensor:
    """Torch twin of :func:`pelc.data.downsample_mask` for [B, 1, H, W] masks."""
    H, W = m.shape[-2:]
    if H % f or W % f:
        raise ValueError(f"mask shape {(H, W)} not divisible by stride {f}")
    if method == "area":
        out = F.avg_pool2d(m, f) if f > 1 else m
    elif method == "nearest":
        out = m[..., ::f, ::f]
    elif method == "bilinear":
        out = _bilinear_matrix(H, f, m.dtype) @ m @ _bilinear_matrix(W, f, m.dtype).T
    else:
        raise ValueError(f"unknown downsample method {method!r}")
    return out.clamp(0, 1)


def heuristic_blend(z_a, z_b, M, f: int, method: str = "area") -> torch.Tensor:
    """Downsample ``M`` to the latent grid, broadcast over channels, mix convexly."""
    z_a, z_b = _t(z_a), _t(z_b)
    if z_a.shape != z_b.shape:
        raise ValueError(f"latent shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    m = _mask_4d(M, z_a)
    if tuple(m.shape[-2:]) != (z_a.shape[-2] * f, z_a.shape[-1] * f):
        raise ValueError(f"mask {tuple(m.shape[-2:])} is not stride {f} times latent {tuple(z_a.shape[-2:])}")
    m = downsample_mask_t(m, f, method)
    if z_a.dim() == 3:
        m = m[0]
    return (1 - m) * z_a + m * z_b


@dataclass
class BlendField:
    """Per-channel, per-site blend weights in [0, 1] plus residual shift."""

    alpha: torch.Tensor
    shift: torch.Tensor
    degenerate: torch.Tensor | None = None

    def apply(self, z_a, z_b) -> torch.Tensor:
        return (1 - self.alpha) * _t(z_a) + self.alpha * _t(z_b) + self.shift

    def apply_alpha_only(self, z_a, z_b) -> torch.Tensor:
        return (1 - self.alpha) * _t(z_a) + self.alpha * _t(z_b)


def unclamped_alpha(z_a, z_b, z_t, eps: float = PROJECTION_EPS) -> torch.Tensor:
    """Least-squares position of ``z_T`` along the segment axis ``z_B - z_A``.

    ``eps`` only stands in for a vanishing denominator, so the minimiser is
    exact whenever the axis has nonzero length.
    """
    z_a, z_b, z_t = _t(z_a), _t(z_b), _t(z_t)
    d = z_b - z_a
    d2 = d * d
    return (z_t - z_a) * d / torch.where(d2 > 0, d2, torch.full_like(d2, eps))


def project_alpha_shift(z_a, z_b, z_t, eps: float = PROJECTION_EPS) -> BlendField:
    """Closed-form minimiser of ``|z_T - ((1-a) z_A + a z_B)|`` over a in [0, 1], with the leftover as shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    z_a, z_b, z_t = _t(z_a), _t(z_b), _t(z_t)
    alpha = unclamped_alpha(z_a, z_b, z_t, eps).clamp(0.0, 1.0)
    shift = z_t - ((1 - alpha) * z_a + alpha * z_b)
    return BlendField(alpha, shift, (z_b - z_a).abs() < DEGENERATE_TOL)


@dataclass
class OutOfRange:
    fraction: float
    n_valid: int
    n_degenerate: int

    def __float__(self) -> float:
        return self.fraction


def out_of_range_fraction(z_a, z_b, z_t, tol: float = DEGENERATE_TOL) -> OutOfRange:
    """Share of non-degenerate elements whose unclamped alpha leaves [0, 1]."""
    z_a, z_b, z_t = _t(z_a), _t(z_b), _t(z_t)
    valid = (z_b - z_a).abs() > tol
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("every element is degenerate (|z_A - z_B| <= tol)")
    a = unclamped_alpha(z_a, z_b, z_t)
    outside = ((a < 0) | (a > 1)) & valid
    return OutOfRange(int(outside.sum()) / n_valid, n_valid, int(valid.numel() - n_valid))
