"""Rectified-flow training on frozen latents and dual-sigma adapter finetuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..autoencoder.train import TrainingDiverged, seed_everything
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data.composites import sample_training_mask
from .model import FlowConfig, FlowNet, add_lora, merge_lora
from .sampling import dual_sigma_corrupt, noised

log = logging.getLogger(__name__)


@dataclass
class FlowTrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    lr_min: float = 5e-5
    log_every: int = 250
    seed: int = 0


@dataclass
class FinetuneConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    rank: int = 4
    lam: float = 0.75
    mask_bank: int = 4096
    log_every: int = 250
    seed: int = 0


def _cosine(opt, steps: int, lr_min: float):
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr_min)


def train_flow(latents: torch.Tensor, cfg: FlowConfig, train: FlowTrainConfig) -> tuple[FlowNet, list[dict]]:
    """Regress ``v = eps - z0`` on ``z_t = (1-t) z0 + t eps`` with t ~ U(0, 1)."""
    if len(latents) == 0:
        raise ValueError("empty latent dataset")
    gen = seed_everything(train.seed)
    torch.manual_seed(cfg.seed)
    model = FlowNet(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=0.0)
    sched = _cosine(opt, train.steps, train.lr_min)
    history, running = [], []
    for step in range(1, train.steps + 1):
        idx = torch.randint(len(latents), (train.batch_size,), generator=gen)
        z0 = latents[idx]
        if torch.rand((), generator=gen) < 0.5:
            z0 = z0.flip(-1)
        eps = torch.randn(z0.shape, generator=gen)
        t = torch.rand(len(z0), generator=gen)
        loss = F.mse_loss(model(noised(z0, eps, t[:, None, None, None]), t), eps - z0)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"flow loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        running.append(loss.item())
        if step % train.log_every == 0 or step == train.steps:
            history.append({"step": step, "loss": float(np.mean(running))})
            log.info("flow step %d loss %.4f", step, history[-1]["loss"])
            running = []
    model.eval()
    return model, history


def latent_masks(n: int, size: int, f: int, seed: int) -> torch.Tensor:
    """Area-downsampled procedural masks [n, 1, size/f, size/f]."""
    rng = np.random.default_rng(seed)
    m = torch.from_numpy(np.stack([sample_training_mask(rng, size) for _ in range(n)]))[:, None]
    return F.avg_pool2d(m, f) if f > 1 else m


def finetune_dual_sigma(
    base: FlowNet,
    latents: torch.Tensor,
    train: FinetuneConfig,
    f: int,
    image_size: int,
) -> tuple[FlowNet, list[dict]]:
    """Low-rank adapter finetune on dual-sigma corrupted latents.

    The network sees ``t = sigma_in`` and must predict ``eps - z0`` everywhere
    while the context is noised at ``lam * sigma_in``. Adapters are merged back,
    so the result is a plain :class:`FlowNet`. Zero steps return an exact copy.
    """
    import copy

    model = copy.deepcopy(base)
    gen = seed_everything(train.seed)
    history = []
    if train.steps > 0:
        add_lora(model, train.rank)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=train.lr, weight_decay=0.0)
        sched = _cosine(opt, train.steps, train.lr * 0.05)
        masks = latent_masks(train.mask_bank, image_size, f, train.seed)
        running = []
        for step in range(1, train.steps + 1):
            idx = torch.randint(len(latents), (train.batch_size,), generator=gen)
            z0 = latents[idx]
            m = masks[torch.randint(len(masks), (train.batch_size,), generator=gen)]
            eps = torch.randn(z0.shape, generator=gen)
            # keep u away from 0 so the context level lam*u stays positive
            u = torch.rand(len(z0), generator=gen).clamp(1e-3, 1 - 1e-3)
            z, _ = dual_sigma_corrupt(z0, m, u, train.lam, eps=eps)
            loss = F.mse_loss(model(z, u), eps - z0)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"dual-sigma loss became {loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running.append(loss.item())
            if step % train.log_every == 0 or step == train.steps:
                history.append({"step": step, "loss": float(np.mean(running))})
                log.info("dual-sigma step %d loss %.4f", step, history[-1]["loss"])
                running = []
        merge_lora(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


def save_flow(path, model: FlowNet, **extra) -> str:
    return save_checkpoint(path, model.state_dict(), {"kind": "flow", "config": model.cfg.to_dict(), **extra})


def load_flow(path) -> FlowNet:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ValueError(f"{path} does not hold a flow model")
    model = FlowNet(FlowConfig.from_dict(meta["config"]))
    model.load_state_dict(tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model

