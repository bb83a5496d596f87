"""Model versus naive latent baseline over a colour-parameter sweep."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import torch

from ..autoencoder.erf import bootstrap_ci
from ..compositor.metrics import perceptual_surrogate, psnr, ssim
from .ops import ColorParams, apply_color_latents_naive, apply_color_pixels, normalised_latent_range

GAMMA_SWEEP = (1.0, 1.5, 2.0, 3.0)
DEFAULT_GRID = tuple(ColorParams(g, c, b) for g, c, b in product(GAMMA_SWEEP, (0.7, 1.0, 1.4), (-0.1, 0.0, 0.1)))
METRICS = ("perceptual", "psnr_db", "ssim")


@dataclass
class ColorTable:
    """Per-method metric samples pooled over the grid, plus per-setting means."""

    samples: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    per_setting: list[dict] = field(default_factory=list)
    n: int = 0

    def summary(self) -> dict[str, dict[str, tuple[float, float, float]]]:
        out = {}
        for method, vals in self.samples.items():
            out[method] = {}
            for k in METRICS:
                lo, hi = bootstrap_ci(vals[k], seed=0)
                out[method][k] = (float(np.mean(vals[k])), lo, hi)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *(f"{k}_{s}" for k in METRICS for s in ("mean", "ci_lo", "ci_hi"))])
        for method, stats in self.summary().items():
            w.writerow([method, *(f"{v:.6g}" for k in METRICS for v in stats[k])])
        return buf.getvalue()


@torch.no_grad()
def evaluate_color(ae, model, images: np.ndarray, grid=DEFAULT_GRID, batch: int = 128) -> ColorTable:
    """Score decodes of both latent operators against ``D(E(clamp(F(x; p))))`` for every grid setting."""
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    x_all = torch.from_numpy(images).float()
    z_all = torch.cat([ae.encode(x_all[i : i + batch]) for i in range(0, len(x_all), batch)])
    lo, hi = normalised_latent_range(ae)
    table = ColorTable(samples={m: {k: [] for k in METRICS} for m in ("model", "naive")}, n=len(images))
    for p in grid:
        cond = torch.tensor(p.conditioning(), dtype=torch.float32)
        setting = {"gamma": p.gamma, "contrast": p.contrast, "brightness": p.brightness}
        for i in range(0, len(x_all), batch):
            x, z = x_all[i : i + batch], z_all[i : i + batch]
            target = ae.decode(ae.encode(apply_color_pixels(x, p))).clamp(0, 1)
            outs = {
                "model": ae.decode(model(z, cond)).clamp(0, 1),
                "naive": ae.decode(apply_color_latents_naive(z, p, lo, hi)).clamp(0, 1),
            }
            for method, out in outs.items():
                vals = {"perceptual": perceptual_surrogate(out, target), "psnr_db": psnr(out, target), "ssim": ssim(out, target)}
                for k, v in vals.items():
                    table.samples[method][k] += v.tolist()
                    setting.setdefault(f"{method}_{k}", []).extend(v.tolist())
        table.per_setting.append({k: (float(np.mean(v)) if isinstance(v, list) else v) for k, v in setting.items()})
    return table


def render_color_grid(ae, model, images: np.ndarray, params: list[ColorParams], path) -> None:
    """Rows per setting: input, pixel target, model decode, naive decode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = torch.from_numpy(images[:1]).float()
    lo, hi = normalised_latent_range(ae)
    fig, axes = plt.subplots(len(params), 4, figsize=(6, 1.6 * len(params)), squeeze=False)
    with torch.no_grad():
        z = ae.encode(x)
        for r, p in enumerate(params):
            cond = torch.tensor(p.conditioning(), dtype=torch.float32)
            panels = [
                x,
                apply_color_pixels(x, p),
                ae.decode(model(z, cond)).clamp(0, 1),
                ae.decode(apply_color_latents_naive(z, p, lo, hi)).clamp(0, 1),
            ]
            for c, img in enumerate(panels):
                axes[r, c].imshow(img[0].permute(1, 2, 0).numpy())
                axes[r, c].set_xticks([])
                axes[r, c].set_yticks([])
            axes[r, 0].set_ylabel(f"g={p.gamma:g} c={p.contrast:g} b={p.brightness:g}", fontsize=6)
    for c, title in enumerate(("input", "pixel op", "model", "naive")):
        axes[0, c].set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
