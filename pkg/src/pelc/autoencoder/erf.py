"""Empirical receptive-field probes and cumulative-energy radii.

Probe maps hold per-site L2 norms (of a decoded difference, a latent
difference or a gradient); the energy used for radii is the squared map.
All probes run in float64 so that far-field tails are not swamped by
rounding noise.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import FrozenAutoencoder

FIXED_DECODER_EPS = 1e-3
ENCODER_DELTA = 0.05


def as_float64(ae: FrozenAutoencoder) -> FrozenAutoencoder:
    if next(iter(ae.buffers())).dtype == torch.float64:
        return ae
    return copy.deepcopy(ae).double().eval()


def _batched(t: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t)
    return t if t.dim() == 4 else t.unsqueeze(0)


def _check_site(i: int, j: int, h: int, w: int, what: str) -> None:
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"{what} {(i, j)} outside grid {(h, w)}")


def adaptive_eps(ae: FrozenAutoencoder, z: torch.Tensor) -> float:
    """Visualisation epsilon: ~0.5 % of decoded RMS, clamped to [2e-3, 1e-2]."""
    ae = as_float64(ae)
    with torch.no_grad():
        rms = float(ae.decode(_batched(z).double()).pow(2).mean().sqrt())
    return float(np.clip(0.005 * rms, 2e-3, 1e-2))


@torch.no_grad()
def erf_probe_decoder(ae: FrozenAutoencoder, z, site: tuple[int, int], eps: float = FIXED_DECODER_EPS) -> np.ndarray:
    """Per-pixel ``||D(z + eps e) - D(z)||_2`` for a perturbation of every channel at ``site``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ae = as_float64(ae)
    z = _batched(z).double()
    _, _, h, w = z.shape
    _check_site(*site, h, w, "latent site")
    base = ae.decode(z)
    zp = z.clone()
    zp[:, :, site[0], site[1]] += eps
    return (ae.decode(zp) - base).pow(2).sum(1).sqrt()[0].numpy()


@torch.no_grad()
def erf_probe_encoder(ae: FrozenAutoencoder, x, pixel: tuple[int, int], delta: float = ENCODER_DELTA) -> np.ndarray:
    """Per-latent-site ``||E(x + delta e_ij) - E(x)||_2`` for a 1-px impulse in all colour channels."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    ae = as_float64(ae)
    x = _batched(x).double()
    _, _, H, W = x.shape
    _check_site(*pixel, H, W, "pixel")
    base = ae.encode(x)
    xp = x.clone()
    xp[:, :, pixel[0], pixel[1]] += delta
    return (ae.encode(xp) - base).pow(2).sum(1).sqrt()[0].numpy()


def erf_probe_gradient(ae: FrozenAutoencoder, z, origin: tuple[int, int], size: int = 5) -> np.ndarray:
    """Channelwise L2 of d/dz of ``sum over a size x size pixel window of D(z)^2``."""
    ae = as_float64(ae)
    z = _batched(z).double().clone().requires_grad_(True)
    y = ae.decode(z)
    H, W = y.shape[-2:]
    r, c = origin
    if r < 0 or c < 0 or r + size > H or c + size > W:
        raise ValueError(f"window at {origin} of size {size} outside image {(H, W)}")
    s = y[:, :, r : r + size, c : c + size].pow(2).sum()
    (grad,) = torch.autograd.grad(s, z)
    return grad.pow(2).sum(1).sqrt()[0].numpy()


def latent_site_center(site: tuple[int, int], f: int) -> tuple[float, float]:
    """Pixel coordinates of the centre of the f x f patch aligned with a latent site."""
    return ((site[0] + 0.5) * f - 0.5, (site[1] + 0.5) * f - 0.5)


def pixel_to_latent_center(pixel: tuple[int, int], f: int) -> tuple[float, float]:
    return ((pixel[0] + 0.5) / f - 0.5, (pixel[1] + 0.5) / f - 0.5)


def _sorted_energy(energy: np.ndarray, center) -> tuple[np.ndarray, np.ndarray]:
    energy = np.asarray(energy, dtype=np.float64)
    if np.any(energy < 0):
        raise ValueError("energy must be non-negative")
    if not np.any(energy > 0):
        raise ValueError("energy map is all zero")
    H, W = energy.shape
    yy, xx = np.mgrid[0:H, 0:W]
    dist = np.hypot(yy - center[0], xx - center[1]).ravel()
    order = np.argsort(dist, kind="stable")
    return dist[order], np.cumsum(energy.ravel()[order])


def cumulative_energy_radius(energy: np.ndarray, center, p: float) -> float:
    """Smallest radius holding a fraction ``p`` of the total energy, as a fraction of the diagonal."""
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    dist, cum = _sorted_energy(energy, center)
    k = int(np.searchsorted(cum, p * cum[-1], side="left"))
    H, W = np.shape(energy)
    return float(dist[min(k, len(dist) - 1)] / math.hypot(H, W))


def energy_curve(energy: np.ndarray, center, n_points: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative energy fraction versus radius (fraction of diagonal); monotone, ends at 1."""
    dist, cum = _sorted_energy(energy, center)
    H, W = np.shape(energy)
    diag = math.hypot(H, W)
    radii = np.linspace(0.0, dist[-1] / diag, n_points)
    idx = np.searchsorted(dist / diag, radii, side="right") - 1
    frac = np.where(idx >= 0, cum[np.clip(idx, 0, None)] / cum[-1], 0.0)
    frac[-1] = 1.0
    return radii, frac


def bootstrap_ci(values, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [50 * (1 - level), 50 * (1 + level)])
    # a constant series must give a zero-width interval despite float noise
    if np.ptp(values) == 0:
        lo = hi = float(values[0])
    return float(lo), float(hi)


@dataclass
class RFReport:
    analytic_r0: float
    analytic_influence: float
    erf_energy_map: np.ndarray
    r50: float
    r90: float
    ci95: tuple[float, float]
    r50_ci95: tuple[float, float] = (0.0, 0.0)
    per_probe: dict = field(default_factory=dict)
    curve: tuple[np.ndarray, np.ndarray] | None = None

    def summary(self) -> dict:
        return {
            "analytic_r0": self.analytic_r0,
            "analytic_influence": self.analytic_influence,
            "r50": self.r50,
            "r90": self.r90,
            "r90_ci95": list(self.ci95),
            "r50_ci95": list(self.r50_ci95),
            "n_probes": len(self.per_probe.get("r90", [])),
        }


def _report(maps, centers, analytic_r0, analytic_influence, seed) -> RFReport:
    energies = [m**2 for m in maps]
    r50 = np.array([cumulative_energy_radius(e, c, 0.5) for e, c in zip(energies, centers)])
    r90 = np.array([cumulative_energy_radius(e, c, 0.9) for e, c in zip(energies, centers)])
    # pooled map, each probe normalised to unit energy before averaging
    pooled = np.mean([e / e.sum() for e in energies], axis=0)
    curves = np.array([energy_curve(e, c)[1] for e, c in zip(energies, centers)])
    radii = np.linspace(0.0, 1.0, curves.shape[1])
    return RFReport(
        analytic_r0=float(analytic_r0),
        analytic_influence=float(analytic_influence),
        erf_energy_map=pooled,
        r50=float(np.mean(r50)),
        r90=float(np.mean(r90)),
        ci95=bootstrap_ci(r90, seed=seed),
        r50_ci95=bootstrap_ci(r50, seed=seed + 1),
        per_probe={"r50": r50.tolist(), "r90": r90.tolist()},
        curve=(radii, curves.mean(axis=0)),
    )


def decoder_erf_report(ae: FrozenAutoencoder, images: np.ndarray, n_probes: int, seed: int = 0, eps: float = FIXED_DECODER_EPS) -> RFReport:
    from .receptive import analytic_influence_field, analytic_receptive_field, autoencoder_layer_specs

    ae64 = as_float64(ae)
    rng = np.random.default_rng(seed)
    maps, centers = [], []
    with torch.no_grad():
        for _ in range(n_probes):
            x = torch.from_numpy(images[int(rng.integers(len(images)))]).double()
            z = ae64.encode(x.unsqueeze(0))
            _, _, h, w = z.shape
            site = (int(rng.integers(h)), int(rng.integers(w)))
            maps.append(erf_probe_decoder(ae64, z, site, eps))
            centers.append(latent_site_center(site, ae.f))
    specs = autoencoder_layer_specs(ae.cfg, "decoder")
    return _report(maps, centers, analytic_receptive_field(specs), analytic_influence_field(specs), seed)


def encoder_erf_report(ae: FrozenAutoencoder, images: np.ndarray, n_probes: int, seed: int = 0, delta: float = ENCODER_DELTA) -> RFReport:
    from .receptive import analytic_receptive_field, autoencoder_layer_specs

    ae64 = as_float64(ae)
    rng = np.random.default_rng(seed)
    maps, centers = [], []
    for _ in range(n_probes):
        x = torch.from_numpy(images[int(rng.integers(len(images)))]).double()
        H, W = x.shape[-2:]
        pixel = (int(rng.integers(H)), int(rng.integers(W)))
        maps.append(erf_probe_encoder(ae64, x, pixel, delta))
        centers.append(pixel_to_latent_center(pixel, ae.f))
    specs = autoencoder_layer_specs(ae.cfg, "encoder")
    r0 = analytic_receptive_field(specs)
    return _report(maps, centers, r0, r0, seed)


def patch_radius_fraction(f: int, H: int, W: int) -> float:
    """Half-diagonal of one f x f patch as a fraction of the image diagonal."""
    return (f / math.sqrt(2.0)) / math.hypot(H, W)
