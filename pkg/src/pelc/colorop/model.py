"""FiLM-conditioned latent transformer predicting a residual for the colour transform."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from ..autoencoder.train import TrainingDiverged, seed_everything
from ..checkpoint import load_checkpoint, save_checkpoint
from ..compositor.metrics import PerceptualSurrogate
from .ops import apply_color_pixels, sample_params

log = logging.getLogger(__name__)


@dataclass
class ColorOpConfig:
    latent_channels: int = 4
    width: int = 64
    depth: int = 3
    heads: int = 4
    cond_dim: int = 64
    grid: tuple[int, int] = (8, 8)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColorOpConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


class FiLMLayer(nn.Module):
    def __init__(self, d: int, heads: int, cond_dim: int) -> None:
        super().__init__()
        self.film = nn.Linear(cond_dim, 4 * d)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        g1, b1, g2, b2 = self.film(cond)[:, None].chunk(4, dim=-1)
        h = self.norm1(x) * (1 + g1) + b1
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x) * (1 + g2) + b2)


class ColorOperator(nn.Module):
    """``z_hat = z + residual(z, FiLM(log gamma, log c, b))``."""

    def __init__(self, cfg: ColorOpConfig) -> None:
        super().__init__()
        self.cfg = cfg
        C, d = cfg.latent_channels, cfg.width
        self.cond = nn.Sequential(nn.Linear(3, cfg.cond_dim), nn.SiLU(), nn.Linear(cfg.cond_dim, cfg.cond_dim), nn.SiLU())
        self.embed = nn.Linear(C, d)
        self.pos = nn.Parameter(torch.zeros(1, cfg.grid[0] * cfg.grid[1], d))
        self.layers = nn.ModuleList(FiLMLayer(d, cfg.heads, cfg.cond_dim) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, C)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def residual(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        B, C, h, w = z.shape
        cond = torch.as_tensor(cond, dtype=z.dtype)
        if cond.dim() == 1:
            cond = cond[None].expand(B, -1)
        c = self.cond(cond)
        x = self.embed(z.flatten(2).transpose(1, 2)) + self.pos
        for layer in self.layers:
            x = layer(x, c)
        return self.out(self.norm(x)).transpose(1, 2).reshape(B, C, h, w)

    def forward(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return z + self.residual(z, cond)


@dataclass
class ColorTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 5e-4
    lr_min: float = 2e-5
    latent_weight: float = 1.0
    perceptual_weight: float = 1.0
    bank_size: int = 8192
    # share of identity-parameter samples, anchoring the near-identity regime
    identity_fraction: float = 0.05
    log_every: int = 250
    seed: int = 0


@torch.no_grad()
def build_color_bank(ae, images: np.ndarray, n: int, seed: int, identity_fraction: float = 0.05, chunk: int = 256):
    rng = np.random.default_rng(seed)
    zs, conds, zts, tgts = [], [], [], []
    for start in range(0, n, chunk):
        k = min(chunk, n - start)
        x = torch.from_numpy(images[rng.integers(len(images), size=k)]).float()
        cond = sample_params(rng, k)
        cond[rng.random(k) < identity_fraction] = 0.0
        cond = torch.from_numpy(cond)
        z_t = ae.encode(apply_color_pixels(x, cond))
        zs.append(ae.encode(x))
        conds.append(cond)
        zts.append(z_t)
        tgts.append(ae.decode(z_t))
    return torch.cat(zs), torch.cat(conds), torch.cat(zts), torch.cat(tgts)


def train_color_operator(ae, images: np.ndarray, cfg: ColorOpConfig, train: ColorTrainConfig) -> tuple[ColorOperator, list[dict]]:
    """Latent MSE to ``E(clamp(F(x; p)))`` plus perceptual distance of the decodes."""
    gen = seed_everything(train.seed)
    z, cond, z_t, target = build_color_bank(ae, images, train.bank_size, train.seed, train.identity_fraction)
    torch.manual_seed(cfg.seed)
    model = ColorOperator(cfg)
    perceptual = PerceptualSurrogate()
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(train.steps, 1), eta_min=train.lr_min)
    history, running = [], []
    for step in range(1, train.steps + 1):
        idx = torch.randint(len(z), (train.batch_size,), generator=gen)
        z_hat = model(z[idx], cond[idx])
        lat = ((z_hat - z_t[idx]) ** 2).mean()
        per = perceptual(ae.decode(z_hat), target[idx]).mean()
        loss = train.latent_weight * lat + train.perceptual_weight * per
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"colour operator loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        running.append((loss.item(), lat.item(), per.item()))
        if step % train.log_every == 0 or step == train.steps:
            l, a, p = np.mean(running, axis=0)
            history.append({"step": step, "loss": float(l), "latent": float(a), "perceptual": float(p)})
            log.info("colorop step %d loss %.4f", step, l)
            running = []
    model.eval()
    return model, history


def save_color_operator(path, model: ColorOperator, **extra) -> str:
    return save_checkpoint(path, model.state_dict(), {"kind": "colorop", "config": model.cfg.to_dict(), **extra})


def load_color_operator(path) -> ColorOperator:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "colorop":
        raise ValueError(f"{path} does not hold a colour operator")
    model = ColorOperator(ColorOpConfig.from_dict(meta["config"]))
    model.load_state_dict(tensors)
    return model.eval()
