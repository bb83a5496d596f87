"""Unconditional rectified-flow velocity network on the latent grid, plus low-rank adapters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FlowConfig:
    latent_channels: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4
    time_dim: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (t[:, None] * 1000.0) * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, ch: int, time_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.film = nn.Linear(time_dim, 2 * ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        return x + self.conv2(F.silu(h))


class SpatialAttention(nn.Module):
    def __init__(self, ch: int, heads: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(8, ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        t = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(t, t, t, need_weights=False)[0]
        return x + out.transpose(1, 2).reshape(B, C, H, W)


class FlowNet(nn.Module):
    """``v_theta(z_t, t)``: conv residual blocks with time FiLM around one global attention layer."""

    def __init__(self, cfg: FlowConfig) -> None:
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, w, 3, padding=1)
        half = cfg.depth // 2
        self.pre = nn.ModuleList(TimeResBlock(w, cfg.time_dim) for _ in range(half))
        self.attn = SpatialAttention(w, cfg.heads)
        self.post = nn.ModuleList(TimeResBlock(w, cfg.time_dim) for _ in range(cfg.depth - half))
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, cfg.latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=z.dtype)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h = self.conv_in(z)
        for blk in self.pre:
            h = blk(h, temb)
        h = self.attn(h)
        for blk in self.post:
            h = blk(h, temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class LoRA(nn.Module):
    """Frozen base layer plus a trainable rank-``r`` update ``scale * B A`` (B zero-initialised)."""

    def __init__(self, base: nn.Module, rank: int, alpha: float | None = None) -> None:
        super().__init__()
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = (alpha or rank) / rank
        if isinstance(base, nn.Conv2d):
            cin = base.in_channels * base.kernel_size[0] * base.kernel_size[1]
            cout = base.out_channels
        elif isinstance(base, nn.Linear):
            cin, cout = base.in_features, base.out_features
        else:
            raise TypeError(f"LoRA supports Conv2d and Linear, not {type(base).__name__}")
        self.A = nn.Parameter(torch.randn(rank, cin) / math.sqrt(cin))
        self.B = nn.Parameter(torch.zeros(cout, rank))

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = self.base
        if isinstance(base, nn.Conv2d):
            w = base.weight + self.delta().view_as(base.weight)
            return F.conv2d(x, w, base.bias, base.stride, base.padding, base.dilation, base.groups)
        return F.linear(x, base.weight + self.delta(), base.bias)


def add_lora(model: nn.Module, rank: int, alpha: float | None = None) -> list[str]:
    """Wrap every 3x3 conv and FiLM linear in ``model`` with a LoRA adapter; freeze the rest."""
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = []
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            target = (isinstance(child, nn.Conv2d) and child.kernel_size == (3, 3)) or (
                isinstance(child, nn.Linear) and child_name == "film"
            )
            if target:
                setattr(module, child_name, LoRA(child, rank, alpha))
                wrapped.append(f"{name}.{child_name}" if name else child_name)
    return wrapped


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold adapters back into plain layers (in place)."""
    for module in list(model.modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, LoRA):
                base = child.base
                with torch.no_grad():
                    base.weight += child.delta().view_as(base.weight)
                setattr(module, child_name, base)
    for p in model.parameters():
        p.requires_grad_(True)
    return model
