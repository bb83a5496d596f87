"""Pixel-equivalence measurement: per-kind metric reports and SDF error profiles.

Every method is scored against ``D(z_T)`` with ``z_T = E(F(x_A, x_B, M))``,
the encode-decode of the pixel composite, so plain reconstruction error of
the autoencoder cancels out of the comparison.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from ..data.composites import CompositeSet
from ..data.fields import compute_halo, compute_sdf, sdf_bins
from ..data.masks import downsample_mask
from .blend import compose_pixels, heuristic_blend, project_alpha_shift
from .metrics import halo_l1, mse, perceptual_surrogate, psnr, ssim

# (z_a, z_b, z_t, masks [B,H,W], kind) -> z_hat
Method = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, str], torch.Tensor]

METRICS = ("ssim", "psnr_db", "perceptual", "halo_l1", "mse", "latent_mse")
MIN_BIN_COUNT = 30
DEFAULT_HALO_PX = 4


@torch.no_grad()
def batched(fn, x: torch.Tensor, batch: int = 128) -> torch.Tensor:
    return torch.cat([fn(x[i : i + batch]) for i in range(0, len(x), batch)])


@dataclass
class PreparedSet:
    """Latents and encode-decode targets of one composite set, per mask kind."""

    z_a: torch.Tensor
    z_b: torch.Tensor
    masks: dict[str, torch.Tensor]
    z_t: dict[str, torch.Tensor]
    target: dict[str, torch.Tensor]
    halos: dict[str, np.ndarray]
    digest: str
    f: int

    def __len__(self) -> int:
        return len(self.z_a)


def prepare(ae, cset: CompositeSet, kinds=None, halo_px: int = DEFAULT_HALO_PX) -> PreparedSet:
    if len(cset) == 0:
        raise ValueError("empty evaluation set")
    kinds = list(kinds or cset.masks)
    x_a = torch.from_numpy(cset.x_a).float()
    x_b = torch.from_numpy(cset.x_b).float()
    z_a, z_b = batched(ae.encode, x_a), batched(ae.encode, x_b)
    masks, z_t, target, halos = {}, {}, {}, {}
    for kind in kinds:
        m = torch.from_numpy(cset.masks[kind]).float()
        comp = compose_pixels(x_a, x_b, m)
        masks[kind] = m
        z_t[kind] = batched(ae.encode, comp)
        target[kind] = batched(ae.decode, z_t[kind]).clamp(0, 1)
        halos[kind] = np.stack([compute_halo(mi, halo_px, ae.f).pixel for mi in cset.masks[kind]])
    return PreparedSet(z_a, z_b, masks, z_t, target, halos, cset.digest(), ae.f)


def builtin_method(name: str, f: int) -> Method:
    """``ground_truth``, ``heuristic_{area,bilinear,nearest}``, ``oracle`` or ``alpha_clamped``."""
    if name == "ground_truth":
        return lambda za, zb, zt, m, kind: zt
    if name.startswith("heuristic"):
        how = name.split("_", 1)[1] if "_" in name else "area"
        return lambda za, zb, zt, m, kind: heuristic_blend(za, zb, m, f, how)
    if name == "oracle":
        return lambda za, zb, zt, m, kind: project_alpha_shift(za.double(), zb.double(), zt.double()).apply(za.double(), zb.double()).to(za.dtype)
    if name == "alpha_clamped":
        return lambda za, zb, zt, m, kind: project_alpha_shift(za, zb, zt).apply_alpha_only(za, zb)
    raise ValueError(f"unknown method {name!r}")


@dataclass
class EquivalenceReport:
    method: str
    ssim: float
    psnr_db: float
    perceptual: float
    halo_l1: float
    mse: float
    latent_mse: float
    per_kind: dict[str, dict[str, float]] = field(default_factory=dict)
    per_sample: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    n: int = 0
    dataset_hash: str = ""

    def to_dict(self, with_samples: bool = False) -> dict:
        d = asdict(self)
        if not with_samples:
            d.pop("per_sample")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "kind", *METRICS])
        for kind, vals in self.per_kind.items():
            w.writerow([self.method, kind, *(f"{vals[k]:.6g}" for k in METRICS)])
        w.writerow([self.method, "mean", *(f"{getattr(self, k):.6g}" for k in METRICS)])
        return buf.getvalue()


@torch.no_grad()
def decode_method(ae, prep: PreparedSet, method: Method, kind: str, batch: int = 128) -> tuple[torch.Tensor, torch.Tensor]:
    zs = []
    for i in range(0, len(prep), batch):
        sl = slice(i, i + batch)
        zs.append(method(prep.z_a[sl], prep.z_b[sl], prep.z_t[kind][sl], prep.masks[kind][sl], kind))
    z_hat = torch.cat(zs).float()
    return z_hat, batched(ae.decode, z_hat).clamp(0, 1)


def evaluate_equivalence(ae, method: Method | str, data: CompositeSet | PreparedSet, kinds=None, name: str | None = None) -> EquivalenceReport:
    """Per-kind SSIM / PSNR / perceptual / halo-L1 / MSE of ``D(z_hat)`` against ``D(z_T)``."""
    prep = data if isinstance(data, PreparedSet) else prepare(ae, data, kinds)
    if len(prep) == 0:
        raise ValueError("empty evaluation set")
    if isinstance(method, str):
        name = name or method
        method = builtin_method(method, prep.f)
    kinds = list(kinds or prep.masks)
    per_kind, per_sample = {}, {}
    for kind in kinds:
        z_hat, out = decode_method(ae, prep, method, kind)
        tgt = prep.target[kind]
        halo = torch.from_numpy(prep.halos[kind]).float()
        has_halo = halo.flatten(1).sum(1) > 0
        samples = {
            "ssim": ssim(out, tgt).tolist(),
            "psnr_db": psnr(out, tgt).tolist(),
            "perceptual": batched_pair(perceptual_surrogate, out, tgt).tolist(),
            "mse": mse(out, tgt).tolist(),
            "latent_mse": mse(z_hat, prep.z_t[kind]).tolist(),
            "halo_l1": halo_l1(out[has_halo], tgt[has_halo], halo[has_halo]).tolist() if has_halo.any() else [],
        }
        per_sample[kind] = samples
        per_kind[kind] = {k: float(np.mean(v)) if len(v) else 0.0 for k, v in samples.items()}
    mean = {k: float(np.mean([per_kind[kind][k] for kind in kinds])) for k in METRICS}
    return EquivalenceReport(
        method=name or getattr(method, "__name__", "custom"),
        per_kind=per_kind,
        per_sample=per_sample,
        n=len(prep),
        dataset_hash=prep.digest,
        **mean,
    )


@torch.no_grad()
def batched_pair(fn, x: torch.Tensor, y: torch.Tensor, batch: int = 128) -> torch.Tensor:
    return torch.cat([fn(x[i : i + batch], y[i : i + batch]) for i in range(0, len(x), batch)])


@dataclass
class SDFProfile:
    """Mean squared error per 1-px signed-distance bin (bin b covers [b, b+1))."""

    scale: str
    bins: np.ndarray
    mean: np.ndarray
    count: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return self.bins + 0.5

    @property
    def flagged(self) -> np.ndarray:
        return self.count < MIN_BIN_COUNT

    def value_at(self, distance: float) -> float:
        """Mean error of the bin containing signed distance ``distance``."""
        b = int(np.floor(distance))
        hit = np.flatnonzero(self.bins == b)
        return float(self.mean[hit[0]]) if hit.size else float("nan")

    def peak_bin(self, reliable_only: bool = True) -> int:
        ok = ~self.flagged if reliable_only and (~self.flagged).any() else np.ones_like(self.flagged)
        idx = np.flatnonzero(ok)
        return int(self.bins[idx[np.argmax(self.mean[idx])]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "center", "mean", "count", "flagged"])
        for b, m, c in zip(self.bins, self.mean, self.count):
            w.writerow([int(b), b + 0.5, f"{m:.8g}", int(c), int(c < MIN_BIN_COUNT)])
        return buf.getvalue()


def _profile(errors: np.ndarray, sdfs: np.ndarray, scale: str) -> SDFProfile:
    bins = sdf_bins(sdfs).ravel()
    err = errors.ravel().astype(np.float64)
    lo = bins.min()
    counts = np.bincount(bins - lo)
    sums = np.bincount(bins - lo, weights=err)
    keep = counts > 0
    ids = np.arange(len(counts))[keep] + lo
    return SDFProfile(scale, ids, sums[keep] / counts[keep], counts[keep])


def sdf_error_profile(ae, method: Method | str, data: CompositeSet | PreparedSet, kind: str = "binary") -> dict[str, SDFProfile]:
    """Error versus signed distance to the mask boundary at pixel and latent scale.

    Pixel scale bins per-pixel MSE of ``D(z_hat)`` vs ``D(z_T)`` by the mask's
    SDF; latent scale bins per-site MSE of ``z_hat`` vs ``z_T`` by the SDF of
    the area-downsampled mask. Degenerate (constant) masks are skipped.
    """
    prep = data if isinstance(data, PreparedSet) else prepare(ae, data, [kind])
    if isinstance(method, str):
        method = builtin_method(method, prep.f)
    z_hat, out = decode_method(ae, prep, method, kind)
    px_err = ((out - prep.target[kind]) ** 2).mean(1).numpy()
    lat_err = ((z_hat - prep.z_t[kind]) ** 2).mean(1).numpy()
    px_err_k, px_sdf, lat_err_k, lat_sdf = [], [], [], []
    for i, m in enumerate(prep.masks[kind].numpy()):
        sdf = compute_sdf(m)
        if sdf.degenerate:
            continue
        px_err_k.append(px_err[i])
        px_sdf.append(sdf.data)
        lat_err_k.append(lat_err[i])
        lat_sdf.append(compute_sdf(downsample_mask(m, prep.f, "area")).data)
    if not px_sdf:
        raise ValueError("no mask with a boundary in the set")
    return {
        "pixel": _profile(np.stack(px_err_k), np.stack(px_sdf), "pixel"),
        "latent": _profile(np.stack(lat_err_k), np.stack(lat_sdf), "latent"),
    }
