"""Ablation suite and alpha/shift internals for trained compositors."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np
import torch

from ..autoencoder.erf import bootstrap_ci
from ..compositor.blend import heuristic_blend, project_alpha_shift
from ..compositor.evaluate import PreparedSet, evaluate_equivalence
from ..data.fields import compute_halo, compute_sdf
from .model import DecFormer, DecformerConfig
from .train import DecformerTrainConfig, train_decformer

ABLATIONS = ("baseline", "no_halo_loss", "unconstrained_alpha_no_shift")


def ablation_configs(name: str, cfg: DecformerConfig, train: DecformerTrainConfig) -> tuple[DecformerConfig, DecformerTrainConfig]:
    if name == "baseline":
        return cfg, train
    if name == "no_halo_loss":
        return cfg, replace(train, lambda_h=0.0)
    if name == "unconstrained_alpha_no_shift":
        return replace(cfg, unconstrained_alpha=True, shift_gate=False), train
    raise ValueError(f"unknown ablation {name!r}")


def decformer_method(model: DecFormer):
    """Adapter turning a DecFormer into an evaluation method."""

    @torch.no_grad()
    def method(z_a, z_b, z_t, masks, kind):
        return model(z_a, z_b, masks).apply(z_a, z_b)

    method.__name__ = "decformer"
    return method


@dataclass
class AblationRow:
    name: str
    seeds: list[int]
    halo_l1: list[float]
    perceptual: list[float]
    mse: list[float]

    def stat(self, metric: str) -> tuple[float, float, float]:
        vals = getattr(self, metric)
        lo, hi = bootstrap_ci(vals, seed=0)
        return float(np.mean(vals)), lo, hi


def ablation_suite(
    ae,
    images: np.ndarray,
    eval_set: PreparedSet,
    cfg: DecformerConfig,
    train: DecformerTrainConfig,
    seeds=(0, 1),
    names=ABLATIONS,
    bank=None,
    val_bank=None,
    models: dict | None = None,
) -> list[AblationRow]:
    """Train each ablation for every seed and score it on ``eval_set``.

    ``models`` may supply already-trained ``(name, seed) -> DecFormer`` entries.
    """
    rows = []
    for name in names:
        row = AblationRow(name, list(seeds), [], [], [])
        for seed in seeds:
            model = (models or {}).get((name, seed))
            if model is None:
                c, t = ablation_configs(name, replace(cfg, seed=seed), replace(train, seed=seed))
                model, _ = train_decformer(ae, images, c, t, bank=bank, val_bank=val_bank)
                if models is not None:
                    models[(name, seed)] = model
            rep = evaluate_equivalence(ae, decformer_method(model), eval_set, name=name)
            row.halo_l1.append(rep.halo_l1)
            row.perceptual.append(rep.perceptual)
            row.mse.append(rep.mse)
        rows.append(row)
    return rows


def ablation_table_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ablation", "seeds", *(f"{m}_{s}" for m in ("halo_l1", "perceptual", "mse") for s in ("mean", "ci_lo", "ci_hi"))])
    for r in rows:
        cells = []
        for m in ("halo_l1", "perceptual", "mse"):
            cells += [f"{v:.6g}" for v in r.stat(m)]
        w.writerow([r.name, " ".join(map(str, r.seeds)), *cells])
    return buf.getvalue()


@dataclass
class Internals:
    alpha: np.ndarray  # [C, h, w]
    shift: np.ndarray
    alpha_star: np.ndarray
    shift_star: np.ndarray
    heuristic_alpha: np.ndarray
    mask: np.ndarray  # [H, W]
    halo_latent: np.ndarray
    m_latent: np.ndarray

    def channel_variance(self, which: str = "heuristic_alpha") -> float:
        return float(getattr(self, which).var(axis=0).mean())

    def shift_mass_in_halo(self) -> tuple[float, float]:
        """(share of |s| L1 inside the latent halo band, share of area inside it)."""
        mag = np.abs(self.shift).sum(0)
        band = self.halo_latent > 0
        total = mag.sum()
        return (float(mag[band].sum() / total) if total > 0 else 0.0), float(band.mean())

    def interior_alpha_error(self, f: int, radius_px: int) -> float:
        """Mean |alpha - m| over latent sites farther than the halo radius from the boundary."""
        sdf = compute_sdf(self.m_latent).data * f
        far = np.abs(sdf) > radius_px
        if not far.any():
            return float("nan")
        return float(np.abs(self.alpha - self.m_latent[None])[:, far].mean())


@torch.no_grad()
def internals_visualization(model: DecFormer, z_a, z_b, z_t, mask: np.ndarray, f: int) -> Internals:
    """Predicted and oracle (alpha, shift) maps for one sample, plus the heuristic's broadcast alpha."""
    z_a, z_b, z_t = (torch.as_tensor(t)[None] if torch.as_tensor(t).dim() == 3 else torch.as_tensor(t) for t in (z_a, z_b, z_t))
    m = torch.from_numpy(np.asarray(mask, np.float32))[None]
    field_ = model(z_a, z_b, m)
    star = project_alpha_shift(z_a.double(), z_b.double(), z_t.double())
    ones, zeros = torch.ones_like(z_a), torch.zeros_like(z_a)
    heur = heuristic_blend(zeros, ones, m, f)
    halo = compute_halo(np.asarray(mask, np.float32), model.cfg.halo_px, f)
    m_lat = m[0].reshape(m.shape[-2] // f, f, m.shape[-1] // f, f).mean((1, 3)).numpy()
    return Internals(
        alpha=field_.alpha[0].numpy(),
        shift=field_.shift[0].numpy(),
        alpha_star=star.alpha[0].float().numpy(),
        shift_star=star.shift[0].float().numpy(),
        heuristic_alpha=heur[0].numpy(),
        mask=np.asarray(mask),
        halo_latent=halo.latent,
        m_latent=m_lat,
    )


def render_internals(internals: Internals, path) -> None:
    """Grid of per-channel maps: rows alpha, alpha*, shift, shift*, heuristic alpha."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [("alpha", internals.alpha, (0, 1)), ("alpha*", internals.alpha_star, (0, 1)),
            ("shift", internals.shift, None), ("shift*", internals.shift_star, None),
            ("heuristic", internals.heuristic_alpha, (0, 1))]
    C = internals.alpha.shape[0]
    fig, axes = plt.subplots(len(rows), C + 2, figsize=(1.6 * (C + 2), 1.6 * len(rows)))
    for r, (label, maps, lim) in enumerate(rows):
        if lim is None:
            v = float(np.abs(maps).max()) or 1.0
            lim = (-v, v)
        cmap = "coolwarm" if label.startswith("shift") else "viridis"
        for c in range(C):
            axes[r, c].imshow(maps[c], vmin=lim[0], vmax=lim[1], cmap=cmap)
        axes[r, C].imshow(maps.mean(0), vmin=lim[0], vmax=lim[1], cmap=cmap)
        axes[r, C + 1].imshow(internals.mask if r == 0 else internals.halo_latent, cmap="gray")
        axes[r, 0].set_ylabel(label)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, C].set_title("mean")
    axes[0, C + 1].set_title("mask")
    axes[1, C + 1].set_title("halo")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
