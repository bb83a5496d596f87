"""Parametric colour transform in pixel space and its naive latent-space counterpart."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

LOG_GAMMA_RANGE = math.log(3.0)
LOG_CONTRAST_RANGE = math.log(2.0)
BRIGHTNESS_RANGE = 0.2


@dataclass(frozen=True)
class ColorParams:
    gamma: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.contrast > 0:
            raise ValueError(f"contrast must be positive, got {self.contrast}")

    def conditioning(self) -> list[float]:
        return [math.log(self.gamma), math.log(self.contrast), self.brightness]

    @property
    def is_identity(self) -> bool:
        return self.gamma == 1.0 and self.contrast == 1.0 and self.brightness == 0.0


def sample_params(rng: np.random.Generator, n: int) -> np.ndarray:
    """[n, 3] conditioning vectors (log gamma, log c, b) from the training distribution."""
    return np.stack(
        [
            rng.uniform(-LOG_GAMMA_RANGE, LOG_GAMMA_RANGE, n),
            rng.uniform(-LOG_CONTRAST_RANGE, LOG_CONTRAST_RANGE, n),
            rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, n),
        ],
        axis=1,
    ).astype(np.float32)


def _per_sample(cond: torch.Tensor, like: torch.Tensor):
    cond = cond.to(like.dtype)
    if cond.dim() == 1:
        cond = cond[None]
    shape = (-1,) + (1,) * (like.dim() - 1)
    inv_gamma = torch.exp(-cond[:, 0]).reshape(shape)
    c = torch.exp(cond[:, 1]).reshape(shape)
    b = cond[:, 2].reshape(shape)
    return inv_gamma, c, b


def _as_cond(p) -> torch.Tensor:
    if isinstance(p, ColorParams):
        return torch.tensor(p.conditioning(), dtype=torch.float64)
    return torch.as_tensor(p)


def apply_color_pixels(x, p, clamp: bool = True):
    """``(x^(1/gamma) - 0.5) c + 0.5 + b``, clamped to [0, 1] unless ``clamp=False``.

    ``p`` is a :class:`ColorParams` or per-sample conditioning vectors
    ``(log gamma, log c, b)``. Evaluated as ``c x^(1/gamma) + (0.5 (1 - c) + b)``,
    which is exact for identity parameters.
    """
    x = torch.as_tensor(x)
    if isinstance(p, ColorParams):
        y = p.contrast * x.pow(1.0 / p.gamma) + (0.5 * (1.0 - p.contrast) + p.brightness)
    else:
        inv_gamma, c, b = _per_sample(_as_cond(p), x)
        y = c * x.pow(inv_gamma) + (0.5 * (1 - c) + b)
    return y.clamp(0.0, 1.0) if clamp else y


def _signed_pow(u: torch.Tensor, e) -> torch.Tensor:
    return torch.sign(u) * u.abs().pow(e)


def apply_color_latents_naive(z, p, z_min: torch.Tensor, z_max: torch.Tensor) -> torch.Tensor:
    """The transform applied directly to latent values.

    Each channel is mapped to ``u = (z - z_min) / (z_max - z_min)`` with the
    frozen latent range; the power uses an odd extension for values outside
    [0, 1]; the change in ``u`` is mapped back to latent units. Identity
    parameters leave ``z`` unchanged bit for bit.
    """
    z = torch.as_tensor(z)
    span = (z_max - z_min).to(z.dtype).clamp_min(1e-6)
    u = (z - z_min.to(z.dtype)) / span
    if isinstance(p, ColorParams):
        y = p.contrast * _signed_pow(u, 1.0 / p.gamma) + (0.5 * (1.0 - p.contrast) + p.brightness)
    else:
        inv_gamma, c, b = _per_sample(_as_cond(p), z)
        y = c * _signed_pow(u, inv_gamma) + (0.5 * (1 - c) + b)
    return z + (y - u) * span


def normalised_latent_range(ae) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen raw-latent min/max expressed in the autoencoder's normalised latent units."""
    lo = (ae.latent_min - ae.latent_mean) / ae.latent_std
    hi = (ae.latent_max - ae.latent_mean) / ae.latent_std
    return lo, hi
