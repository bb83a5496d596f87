"""Small convolutional autoencoder standing in for a latent-diffusion VAE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class AutoencoderConfig:
    f: int = 4
    latent_channels: int = 4
    widths: tuple[int, ...] = (32, 64, 96)
    attention: bool = True
    groups: int = 8
    variational: bool = False
    # linear pixel-unshuffle/shuffle pair; with f=1 the exact identity
    identity: bool = False
    in_channels: int = 3

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if self.f < 1 or self.f & (self.f - 1):
            raise ValueError(f"stride f must be a power of 2, got {self.f}")
        if self.identity:
            self.latent_channels = self.in_channels * self.f * self.f
        elif len(self.widths) != int(math.log2(self.f)) + 1:
            raise ValueError(f"need log2(f)+1 = {int(math.log2(self.f)) + 1} widths, got {len(self.widths)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        return cls(**d)


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, ch), ch, eps=1e-6)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int) -> None:
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head global self-attention over all spatial sites."""

    def __init__(self, ch: int, groups: int) -> None:
        super().__init__()
        self.norm = _norm(ch, groups)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, H * W).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(C), dim=-1)  # [B, HW, HW]
        out = (v @ attn.transpose(1, 2)).reshape(B, C, H, W)
        return x + self.proj(out)


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig) -> None:
        super().__init__()
        w = cfg.widths
        self.conv_in = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.down = nn.ModuleList()
        for i, ch in enumerate(w):
            stage = nn.Module()
            stage.block = ResBlock(ch, ch, cfg.groups)
            stage.downsample = nn.Conv2d(ch, w[i + 1], 3, stride=2, padding=1) if i + 1 < len(w) else None
            self.down.append(stage)
        self.mid1 = ResBlock(w[-1], w[-1], cfg.groups)
        self.attn = AttnBlock(w[-1], cfg.groups) if cfg.attention else nn.Identity()
        self.mid2 = ResBlock(w[-1], w[-1], cfg.groups)
        self.norm_out = _norm(w[-1], cfg.groups)
        out_ch = cfg.latent_channels * (2 if cfg.variational else 1)
        self.conv_out = nn.Conv2d(w[-1], out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(x)
        for stage in self.down:
            h = stage.block(h)
            if stage.downsample is not None:
                h = stage.downsample(h)
        h = self.mid2(self.attn(self.mid1(h)))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig) -> None:
        super().__init__()
        w = cfg.widths
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[-1], 3, padding=1)
        self.mid1 = ResBlock(w[-1], w[-1], cfg.groups)
        self.attn = AttnBlock(w[-1], cfg.groups) if cfg.attention else nn.Identity()
        self.mid2 = ResBlock(w[-1], w[-1], cfg.groups)
        self.up = nn.ModuleList()
        for i in reversed(range(len(w))):
            stage = nn.Module()
            stage.block = ResBlock(w[i], w[i], cfg.groups)
            stage.upconv = nn.Conv2d(w[i], w[i - 1], 3, padding=1) if i > 0 else None
            self.up.append(stage)
        self.norm_out = _norm(w[0], cfg.groups)
        self.conv_out = nn.Conv2d(w[0], cfg.in_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.mid2(self.attn(self.mid1(self.conv_in(z))))
        for stage in self.up:
            h = stage.block(h)
            if stage.upconv is not None:
                h = stage.upconv(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class IdentityEncoder(nn.Module):
    def __init__(self, f: int) -> None:
        super().__init__()
        self.f = f

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.pixel_unshuffle(x, self.f) if self.f > 1 else x


class IdentityDecoder(nn.Module):
    def __init__(self, f: int) -> None:
        super().__init__()
        self.f = f

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.pixel_shuffle(z, self.f) if self.f > 1 else z


def build_autoencoder(cfg: AutoencoderConfig) -> tuple[nn.Module, nn.Module]:
    if cfg.identity:
        return IdentityEncoder(cfg.f), IdentityDecoder(cfg.f)
    return Encoder(cfg), Decoder(cfg)


@dataclass
class LatentStats:
    mean: list[float]
    std: list[float]
    min: list[float] = field(default_factory=list)
    max: list[float] = field(default_factory=list)


class FrozenAutoencoder(nn.Module):
    """Encoder/decoder pair plus frozen per-channel latent normalisation.

    ``encode`` returns normalised latents ``(E(x) - mean) / std`` and
    ``decode`` undoes the normalisation before running the decoder, so every
    downstream module works in the same normalised latent space.
    """

    def __init__(self, cfg: AutoencoderConfig, encoder: nn.Module, decoder: nn.Module, stats: LatentStats | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder
        self.decoder = decoder
        C = cfg.latent_channels
        stats = stats or LatentStats([0.0] * C, [1.0] * C, [-1.0] * C, [1.0] * C)
        self.register_buffer("latent_mean", torch.tensor(stats.mean, dtype=torch.float32).view(1, C, 1, 1))
        self.register_buffer("latent_std", torch.tensor(stats.std, dtype=torch.float32).view(1, C, 1, 1))
        self.register_buffer("latent_min", torch.tensor(stats.min or [-1.0] * C, dtype=torch.float32).view(1, C, 1, 1))
        self.register_buffer("latent_max", torch.tensor(stats.max or [1.0] * C, dtype=torch.float32).view(1, C, 1, 1))

    @property
    def f(self) -> int:
        return self.cfg.f

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    def raw_encode(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x)
        if self.cfg.variational and not self.cfg.identity:
            h = h[:, : self.cfg.latent_channels]
        return h

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.f or x.shape[-2] % self.f:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by stride {self.f}")
        return (self.raw_encode(x) - self.latent_mean.to(x.dtype)) / self.latent_std.to(x.dtype)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z * self.latent_std.to(z.dtype) + self.latent_mean.to(z.dtype))

    def stats(self) -> LatentStats:
        flat = lambda t: t.flatten().tolist()  # noqa: E731
        return LatentStats(flat(self.latent_mean), flat(self.latent_std), flat(self.latent_min), flat(self.latent_max))

    def freeze(self) -> "FrozenAutoencoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def identity_autoencoder(f: int = 1, in_channels: int = 3) -> FrozenAutoencoder:
    cfg = AutoencoderConfig(f=f, identity=True, in_channels=in_channels, widths=())
    enc, dec = build_autoencoder(cfg)
    return FrozenAutoencoder(cfg, enc, dec).freeze()
