"""Training, freezing and (de)serialisation of the toy autoencoder."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import load_checkpoint, save_checkpoint
from ..compositor.metrics import PerceptualSurrogate, psnr
from .model import AutoencoderConfig, FrozenAutoencoder, LatentStats, build_autoencoder

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AETrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-4
    mse_weight: float = 1.0
    perceptual_weight: float = 0.1
    kl_weight: float = 1e-6
    log_every: int = 500
    seed: int = 0


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    return torch.Generator().manual_seed(seed)


@torch.no_grad()
def latent_stats(encoder, images: torch.Tensor, cfg: AutoencoderConfig, batch: int = 256) -> LatentStats:
    zs = []
    for i in range(0, len(images), batch):
        z = encoder(images[i : i + batch])
        if cfg.variational:
            z = z[:, : cfg.latent_channels]
        zs.append(z)
    z = torch.cat(zs).transpose(0, 1).flatten(1).double()
    return LatentStats(
        mean=z.mean(1).tolist(),
        std=z.std(1).clamp_min(1e-6).tolist(),
        min=z.min(1).values.tolist(),
        max=z.max(1).values.tolist(),
    )


@torch.no_grad()
def reconstruction_psnr(ae: FrozenAutoencoder, images: torch.Tensor, batch: int = 256) -> float:
    vals = []
    for i in range(0, len(images), batch):
        x = images[i : i + batch]
        vals.append(psnr(ae.decode(ae.encode(x)).clamp(0, 1), x))
    return float(torch.cat(vals).mean())


def train_autoencoder(
    images: np.ndarray,
    cfg: AutoencoderConfig,
    train: AETrainConfig,
    val_images: np.ndarray | None = None,
) -> tuple[FrozenAutoencoder, list[dict]]:
    """Train encoder/decoder on ``images`` and return the frozen model plus a metric log.

    Loss is ``mse_weight * MSE + perceptual_weight * surrogate`` (plus a small KL
    term for the variational variant). ``steps=0`` freezes the initialisation.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    gen = seed_everything(train.seed)
    encoder, decoder = build_autoencoder(cfg)
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    val = torch.from_numpy(np.ascontiguousarray(val_images, dtype=np.float32)) if val_images is not None else data[:256]
    params = list(encoder.parameters()) + list(decoder.parameters())
    history: list[dict] = []
    if params and train.steps > 0:
        perceptual = PerceptualSurrogate()
        opt = torch.optim.AdamW(params, lr=train.lr, weight_decay=0.0)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=train.steps, eta_min=train.lr_min)
        last_finite = math.nan
        for step in range(1, train.steps + 1):
            idx = torch.randint(len(data), (train.batch_size,), generator=gen)
            x = data[idx]
            h = encoder(x)
            kl = h.new_zeros(())
            if cfg.variational:
                mu, logvar = h.chunk(2, dim=1)
                logvar = logvar.clamp(-30, 20)
                h = mu + torch.randn(mu.shape, generator=gen) * torch.exp(0.5 * logvar)
                kl = 0.5 * (mu**2 + logvar.exp() - 1 - logvar).mean()
            y = decoder(h)
            loss = train.mse_weight * ((y - x) ** 2).mean() + train.perceptual_weight * perceptual(y, x).mean()
            loss = loss + train.kl_weight * kl
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"autoencoder loss became {loss.item()} at step {step} (last finite {last_finite:.5g})")
            last_finite = loss.item()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            if step % train.log_every == 0 or step == train.steps:
                ae = _freeze(cfg, encoder, decoder, data)
                rec = reconstruction_psnr(ae, val)
                history.append({"step": step, "loss": last_finite, "val_psnr": rec})
                log.info("autoencoder step %d loss %.5f val psnr %.2f dB", step, last_finite, rec)
                encoder.train()
                decoder.train()
    return _freeze(cfg, encoder, decoder, data), history


def _freeze(cfg, encoder, decoder, data) -> FrozenAutoencoder:
    encoder.eval()
    decoder.eval()
    stats = latent_stats(encoder, data, cfg)
    return FrozenAutoencoder(cfg, encoder, decoder, stats)


def save_autoencoder(path: str | Path, ae: FrozenAutoencoder, **extra) -> str:
    tensors = {f"encoder.{k}": v for k, v in ae.encoder.state_dict().items()}
    tensors.update({f"decoder.{k}": v for k, v in ae.decoder.state_dict().items()})
    meta = {"kind": "autoencoder", "config": ae.cfg.to_dict(), "latent_stats": asdict(ae.stats()), **extra}
    return save_checkpoint(path, tensors, meta)


def load_autoencoder(path: str | Path) -> FrozenAutoencoder:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise ValueError(f"{path} does not hold an autoencoder")
    cfg = AutoencoderConfig.from_dict(meta["config"])
    enc, dec = build_autoencoder(cfg)
    enc.load_state_dict({k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")})
    dec.load_state_dict({k[len("decoder.") :]: v for k, v in tensors.items() if k.startswith("decoder.")})
    return FrozenAutoencoder(cfg, enc, dec, LatentStats(**meta["latent_stats"])).freeze()
