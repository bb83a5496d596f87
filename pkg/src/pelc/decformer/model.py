"""DecFormer-mini: a mask-prior network plus multi-scale FiLM transformer blocks
that predict a per-channel blend ``alpha`` and a residual ``shift`` on the latent grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..compositor.blend import BlendField
from .conditioning import halo_t


@dataclass
class DecformerConfig:
    latent_channels: int = 4
    f: int = 4
    patch_sizes: tuple[int, ...] = (2, 1, 1)
    hidden: int = 48
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    film_dims: int = 32
    prior_width: int = 16
    token_dim: int = 32
    fourier_bands: int = 3
    halo_px: int = 4
    shift_gate: bool = True
    # ablation: linear (unbounded) alpha with the shift head removed
    unconstrained_alpha: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        if not self.patch_sizes or self.patch_sizes[-1] != 1:
            raise ValueError("last patch size must be 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.unconstrained_alpha:
            self.shift_gate = False

    def check_latent(self, h: int, w: int) -> None:
        for p in self.patch_sizes:
            if h % p or w % p:
                raise ValueError(f"patch size {p} does not divide latent grid {(h, w)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_sizes"] = list(self.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecformerConfig":
        return cls(**d)


def fourier_features(m: torch.Tensor, bands: int) -> torch.Tensor:
    feats = [m]
    for k in range(bands):
        feats += [torch.sin((2**k) * math.pi * m), torch.cos((2**k) * math.pi * m)]
    return torch.cat(feats, dim=1)


class FFNGLU(nn.Module):
    def __init__(self, cin: int, hidden: int, cout: int) -> None:
        super().__init__()
        self.inp = nn.Conv2d(cin, 2 * hidden, 1)
        self.out = nn.Conv2d(hidden, cout, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, g = self.inp(x).chunk(2, dim=1)
        return self.out(a * F.gelu(g))


class MBConv(nn.Module):
    """Inverted bottleneck with depthwise 3x3 and squeeze-excitation."""

    def __init__(self, ch: int, expand: int = 2) -> None:
        super().__init__()
        mid = ch * expand
        self.expand = nn.Conv2d(ch, mid, 1)
        self.dw = nn.Conv2d(mid, mid, 3, padding=1, groups=mid)
        self.se_reduce = nn.Conv2d(mid, max(4, mid // 8), 1)
        self.se_expand = nn.Conv2d(max(4, mid // 8), mid, 1)
        self.project = nn.Conv2d(mid, ch, 1)
        self.norm = nn.GroupNorm(1, ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.expand(self.norm(x)))
        h = F.silu(self.dw(h))
        se = torch.sigmoid(self.se_expand(F.silu(self.se_reduce(h.mean((2, 3), keepdim=True)))))
        return x + self.project(h * se)


class BlurDown(nn.Module):
    """Binomial low-pass followed by a learned 2x2 stride-2 conv."""

    def __init__(self, cin: int, cout: int) -> None:
        super().__init__()
        k = torch.tensor([1.0, 2.0, 1.0])
        k = (k[:, None] * k[None, :]) / 16.0
        self.register_buffer("kernel", k[None, None].repeat(cin, 1, 1, 1))
        self.down = nn.Conv2d(cin, cout, 2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), self.kernel.to(x.dtype), groups=x.shape[1])
        return self.down(x)


@dataclass
class MaskPrior:
    """Content-agnostic prior: per-channel ``alpha0`` [B,C,h,w] and mask tokens [B,h*w,d_tok]."""

    alpha0: torch.Tensor
    tokens: torch.Tensor
    logits: torch.Tensor


class MaskPriorNet(nn.Module):
    def __init__(self, cfg: DecformerConfig) -> None:
        super().__init__()
        self.cfg = cfg
        cin = 1 + 2 * cfg.fourier_bands
        w = cfg.prior_width
        self.stem = nn.Conv2d(cin, w, 3, padding=1)
        stages = []
        for _ in range(int(math.log2(cfg.f))):
            stages += [MBConv(w), BlurDown(w, w)]
        stages.append(MBConv(w))
        self.body = nn.Sequential(*stages)
        self.alpha_head = FFNGLU(w, 2 * w, cfg.latent_channels)
        self.token_head = FFNGLU(w, 2 * w, cfg.token_dim)

    def forward(self, mask: torch.Tensor) -> MaskPrior:
        if mask.dim() == 3:
            mask = mask[:, None]
        H, W = mask.shape[-2:]
        if H % self.cfg.f or W % self.cfg.f:
            raise ValueError(f"mask size {(H, W)} not divisible by stride {self.cfg.f}")
        h = self.body(self.stem(fourier_features(mask, self.cfg.fourier_bands)))
        logits = self.alpha_head(h)
        tokens = self.token_head(h).flatten(2).transpose(1, 2)
        return MaskPrior(torch.sigmoid(logits), tokens, logits)


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[B, C, h, w] -> [B, (h/p)(w/p), C p^2]"""
    return F.pixel_unshuffle(x, p).flatten(2).transpose(1, 2) if p > 1 else x.flatten(2).transpose(1, 2)


def unpatchify(t: torch.Tensor, p: int, h: int, w: int) -> torch.Tensor:
    B, _, D = t.shape
    x = t.transpose(1, 2).reshape(B, D, h // p, w // p)
    return F.pixel_shuffle(x, p) if p > 1 else x


class Block(nn.Module):
    """Re-patch the hidden grid, run one FiLM-modulated transformer layer, unpatch, refine locally."""

    def __init__(self, cfg: DecformerConfig, p: int, grid: tuple[int, int]) -> None:
        super().__init__()
        C, d, hid = cfg.latent_channels, cfg.width, cfg.hidden
        self.p = p
        self.inject = nn.Conv2d(6 * C, hid, 1)
        self.to_tok = nn.Linear(hid * p * p, d)
        self.pos = nn.Parameter(torch.zeros(1, (grid[0] // p) * (grid[1] // p), d))
        self.film = nn.Sequential(nn.Linear(2 * p * p, cfg.film_dims), nn.SiLU(), nn.Linear(cfg.film_dims, 4 * d))
        nn.init.zeros_(self.film[-1].weight)
        nn.init.zeros_(self.film[-1].bias)
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.cross = None
        if p == 1:
            self.norm_x = nn.LayerNorm(d)
            self.cross = nn.MultiheadAttention(d, cfg.heads, kdim=cfg.token_dim, vdim=cfg.token_dim, batch_first=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))
        self.from_tok = nn.Linear(d, hid * p * p)
        self.local = nn.Sequential(nn.Conv2d(hid, hid, 3, padding=1), nn.GELU(), nn.Conv2d(hid, hid, 3, padding=1))
        self.alpha_head = nn.Conv2d(hid, C, 1)
        self.shift_head = nn.Conv2d(hid, C, 1)
        for head in (self.alpha_head, self.shift_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, h, feats, cond, mask_tokens):
        B, _, gh, gw = h.shape
        h = h + self.inject(feats)
        t = self.to_tok(patchify(h, self.p)) + self.pos
        g1, b1, g2, b2 = self.film(patchify(cond, self.p)).chunk(4, dim=-1)
        x = self.norm1(t) * (1 + g1) + b1
        t = t + self.attn(x, x, x, need_weights=False)[0]
        if self.cross is not None:
            t = t + self.cross(self.norm_x(t), mask_tokens, mask_tokens, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t) * (1 + g2) + b2)
        h = h + unpatchify(self.from_tok(t), self.p, gh, gw)
        h = h + self.local(h)
        return h


class DecFormer(nn.Module):
    """Predicts ``(alpha, shift)`` so that ``(1-alpha) z_A + alpha z_B + shift`` decodes like the pixel composite."""

    def __init__(self, cfg: DecformerConfig, grid: tuple[int, int] = (8, 8)) -> None:
        super().__init__()
        cfg.check_latent(*grid)
        self.cfg = cfg
        self.grid = tuple(grid)
        self.prior = MaskPriorNet(cfg)
        self.stem = nn.Conv2d(6 * cfg.latent_channels, cfg.hidden, 3, padding=1)
        self.blocks = nn.ModuleList(Block(cfg, p, grid) for p in cfg.patch_sizes)
        # 1.0 in normal use; the staged trainer ramps it from 0 during shift warm-up
        self.register_buffer("gate", torch.tensor(1.0 if cfg.shift_gate else 0.0))

    def mask_prior(self, mask: torch.Tensor) -> MaskPrior:
        return self.prior(mask)

    def alpha_params(self):
        return [p for n, p in self.named_parameters() if "shift_head" not in n]

    def shift_params(self):
        return [p for n, p in self.named_parameters() if "shift_head" in n]

    def _alpha(self, a: torch.Tensor) -> torch.Tensor:
        return a if self.cfg.unconstrained_alpha else torch.sigmoid(a)

    def forward(self, z_a, z_b, mask, prior: MaskPrior | None = None, halo_latent=None, m_latent=None) -> BlendField:
        if mask.dim() == 3:
            mask = mask[:, None]
        gh, gw = z_a.shape[-2:]
        if (gh, gw) != self.grid:
            raise ValueError(f"latent grid {(gh, gw)} does not match model grid {self.grid}")
        if mask.shape[-2:] != (gh * self.cfg.f, gw * self.cfg.f):
            raise ValueError(f"mask {tuple(mask.shape[-2:])} does not match latent grid {(gh, gw)} at stride {self.cfg.f}")
        if prior is None:
            prior = self.prior(mask)
        if halo_latent is None or m_latent is None:
            _, halo_latent, m_latent = halo_t(mask, self.cfg.halo_px, self.cfg.f)
        cond = torch.cat([halo_latent, m_latent], dim=1)
        a = prior.alpha0 if self.cfg.unconstrained_alpha else prior.logits
        s_raw = torch.zeros_like(z_a)
        use_shift = bool(self.gate > 0)

        def features(a, s):
            alpha = self._alpha(a)
            z_hat = (1 - alpha) * z_a + alpha * z_b + s
            return torch.cat([z_a, z_b, alpha, s, (z_hat - z_a).abs(), (z_hat - z_b).abs()], dim=1)

        feats = features(a, s_raw)
        h = self.stem(feats)
        for block in self.blocks:
            h = block(h, feats, cond, prior.tokens)
            a = a + block.alpha_head(h)
            if use_shift:
                s_raw = s_raw + block.shift_head(h)
            feats = features(a, self.gate * s_raw)
        alpha = self._alpha(a)
        shift = self.gate * s_raw if use_shift else torch.zeros_like(z_a)
        return BlendField(alpha, shift)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
