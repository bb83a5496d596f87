"""Pixel-equivalence objective: latent MSE + perceptual surrogate + halo-weighted L1."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..compositor.metrics import PerceptualSurrogate


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class LossParts:
    total: torch.Tensor
    latent: torch.Tensor
    perceptual: torch.Tensor
    halo: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "latent", "perceptual", "halo")}


_PERCEPTUAL: PerceptualSurrogate | None = None


def _surrogate() -> PerceptualSurrogate:
    global _PERCEPTUAL
    if _PERCEPTUAL is None:
        _PERCEPTUAL = PerceptualSurrogate().eval()
        for p in _PERCEPTUAL.parameters():
            p.requires_grad_(False)
    return _PERCEPTUAL


def weighted_l1(x: torch.Tensor, y: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Per-sample ``sum(w |x-y|) / (C sum(w))``; samples without halo contribute 0."""
    if w.dim() == 3:
        w = w[:, None]
    num = (w * (x - y).abs()).flatten(1).sum(1)
    den = w.flatten(1).sum(1) * x.shape[1]
    return torch.where(den > 0, num / den.clamp_min(1e-12), torch.zeros_like(num))


def pelc_loss(
    z_hat: torch.Tensor,
    z_t: torch.Tensor,
    ae,
    halo_px: torch.Tensor,
    lambda_e: float = 0.25,
    lambda_h: float = 1.0,
    target_px: torch.Tensor | None = None,
) -> LossParts:
    """``lambda_e * MSE(z_hat, z_T) + perceptual(D(z_hat), D(z_T)) + lambda_h * haloL1(D(z_hat), D(z_T))``.

    ``target_px`` may carry a precomputed ``D(z_T)``. Batch means are taken
    per term. Raises :class:`NonFiniteLoss` on NaN/inf.
    """
    if target_px is None:
        with torch.no_grad():
            target_px = ae.decode(z_t)
    out = ae.decode(z_hat)
    latent = ((z_hat - z_t) ** 2).mean()
    perceptual = _surrogate()(out, target_px).mean()
    halo = weighted_l1(out, target_px, halo_px.to(out.dtype)).mean() if lambda_h != 0 else out.new_zeros(())
    total = perceptual
    if lambda_e != 0:
        total = total + lambda_e * latent
    if lambda_h != 0:
        total = total + lambda_h * halo
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite PELC loss: latent={latent.item():.4g} perceptual={perceptual.item():.4g} "
            f"halo={halo.item():.4g} |z_hat|max={z_hat.detach().abs().max().item():.4g}"
        )
    return LossParts(total, latent, perceptual, halo)


def shift_l1(shift: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Scale-aware L1 on the shift (relative to per-channel target spread)."""
    scale = z_t.detach().flatten(2).std(-1)[..., None, None] + 1e-3
    return (shift.abs() / scale).mean()


def cosine_hinge(shift: torch.Tensor, z_a: torch.Tensor, z_b: torch.Tensor, margin: float = 0.5) -> torch.Tensor:
    """Penalise shifts aligned with the blend axis ``z_B - z_A`` beyond ``margin``."""
    d = z_b - z_a
    cos = (shift * d).sum(1) / (shift.norm(dim=1) * d.norm(dim=1) + 1e-6)
    return torch.relu(cos.abs() - margin).mean()


def direct_supervision(alpha, shift, alpha_star, shift_star) -> torch.Tensor:
    return ((alpha - alpha_star) ** 2).mean() + ((shift - shift_star) ** 2).mean()
