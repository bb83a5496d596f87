"""Image-space metrics: SSIM, PSNR, halo-weighted L1 and a perceptual surrogate.

The perceptual surrogate stands in for LPIPS. It compares unit-normalised
activations of a fixed, seed-pinned random convolutional stack at three
scales. Its weights ship with the package (``perceptual_weights.npz``) and
can be regenerated bit-for-bit with :func:`generate_perceptual_weights`.
Absolute values are not comparable to LPIPS numbers.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03

PERCEPTUAL_SEED = 20240611
PERCEPTUAL_CHANNELS = (3, 16, 32, 32)
WEIGHTS_PATH = Path(__file__).with_name("perceptual_weights.npz")


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def mse(x, y) -> torch.Tensor:
    x, y = _batched(_as_tensor(x)), _batched(_as_tensor(y))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return ((x - y) ** 2).flatten(1).mean(1)


def psnr(x, y, data_range: float = 1.0) -> torch.Tensor:
    """Per-sample PSNR in dB; identical pairs report the finite 99 dB sentinel."""
    err = mse(x, y)
    out = 10.0 * torch.log10(data_range**2 / err)
    return torch.clamp(torch.nan_to_num(out, posinf=PSNR_SENTINEL), max=PSNR_SENTINEL)


def ssim(x, y, data_range: float = 1.0, win_size: int = SSIM_WINDOW) -> torch.Tensor:
    """Per-sample SSIM with a uniform ``win_size`` window and sample covariance.

    Constants K1=0.01, K2=0.03; the map is averaged over the valid (unpadded)
    region and over channels, matching scikit-image's default settings.
    """
    x, y = _batched(_as_tensor(x)), _batched(_as_tensor(y))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    x = x.to(torch.float64)
    y = y.to(torch.float64)
    pool = lambda t: F.avg_pool2d(t, win_size, stride=1)  # noqa: E731
    n = win_size * win_size
    cov_norm = n / (n - 1)
    ux, uy = pool(x), pool(y)
    vx = cov_norm * (pool(x * x) - ux * ux)
    vy = cov_norm * (pool(y * y) - uy * uy)
    vxy = cov_norm * (pool(x * y) - ux * uy)
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + C1) * (2 * vxy + C2)) / ((ux**2 + uy**2 + C1) * (vx + vy + C2))
    return s.flatten(1).mean(1)


def halo_l1(x, y, w) -> torch.Tensor:
    """sum(w * |x - y|) / sum(w), with ``w`` [.., H, W] broadcast over channels."""
    x, y = _batched(_as_tensor(x)), _batched(_as_tensor(y))
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    w = _as_tensor(w).to(x.dtype)
    if w.dim() == 2:
        w = w[None, None]
    elif w.dim() == 3:
        w = w[:, None]
    w = w.expand(x.shape[0], 1, *x.shape[-2:])
    denom = w.flatten(1).sum(1) * x.shape[1]
    if torch.any(denom <= 0):
        raise ValueError("halo weights are all zero")
    return (w * (x - y).abs()).flatten(1).sum(1) / denom


def generate_perceptual_weights(seed: int = PERCEPTUAL_SEED) -> dict[str, np.ndarray]:
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for i, (cin, cout) in enumerate(zip(PERCEPTUAL_CHANNELS[:-1], PERCEPTUAL_CHANNELS[1:])):
        std = (2.0 / (cin * 9)) ** 0.5
        out[f"conv{i}.weight"] = (torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64) * std).numpy()
        out[f"conv{i}.bias"] = (torch.randn(cout, generator=gen, dtype=torch.float64) * 0.1).numpy()
    return out


def write_perceptual_weights(path: Path = WEIGHTS_PATH) -> None:
    np.savez(path, **generate_perceptual_weights())


@lru_cache(maxsize=1)
def _shipped_weights() -> dict[str, np.ndarray]:
    with np.load(WEIGHTS_PATH) as data:
        return {k: data[k] for k in data.files}


class PerceptualSurrogate(nn.Module):
    """Multi-scale feature distance under fixed random convolutions (LPIPS stand-in)."""

    def __init__(self) -> None:
        super().__init__()
        weights = _shipped_weights()
        self.n_scales = len(PERCEPTUAL_CHANNELS) - 1
        for i in range(self.n_scales):
            self.register_buffer(f"w{i}", torch.from_numpy(weights[f"conv{i}.weight"]).float())
            self.register_buffer(f"b{i}", torch.from_numpy(weights[f"conv{i}.bias"]).float())

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = 2.0 * x - 1.0
        feats = []
        for i in range(self.n_scales):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            w = getattr(self, f"w{i}").to(h.dtype)
            b = getattr(self, f"b{i}").to(h.dtype)
            h = F.relu(F.conv2d(F.pad(h, (1, 1, 1, 1), mode="replicate"), w, b))
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        x, y = _batched(x), _batched(y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
        total = x.new_zeros(x.shape[0])
        for fx, fy in zip(self.features(x), self.features(y)):
            fx = fx / (fx.norm(dim=1, keepdim=True) + 1e-10)
            fy = fy / (fy.norm(dim=1, keepdim=True) + 1e-10)
            total = total + ((fx - fy) ** 2).sum(1).flatten(1).mean(1)
        return total / self.n_scales


_SURROGATE: PerceptualSurrogate | None = None


def perceptual_surrogate(x, y) -> torch.Tensor:
    """Per-sample perceptual distance using the shared surrogate instance."""
    global _SURROGATE
    if _SURROGATE is None:
        _SURROGATE = PerceptualSurrogate().eval()
    x, y = _as_tensor(x), _as_tensor(y)
    return _SURROGATE(x, y)
