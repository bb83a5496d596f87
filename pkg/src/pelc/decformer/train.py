"""Staged training of DecFormer-mini: alpha only, shift warm-up, then joint."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..autoencoder.train import seed_everything
from ..checkpoint import load_checkpoint, save_checkpoint
from ..compositor.blend import compose_pixels, project_alpha_shift
from ..data.composites import sample_training_mask
from .conditioning import halo_t
from .loss import NonFiniteLoss, cosine_hinge, direct_supervision, pelc_loss, shift_l1
from .model import DecFormer, DecformerConfig

log = logging.getLogger(__name__)

STAGES = ("alpha_only", "shift_warmup", "joint")


class StageRegression(RuntimeError):
    pass


@dataclass
class DecformerTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 5e-4
    lr_min_ratio: float = 0.05
    weight_decay: float = 1e-4
    sgdr_t0: int = 500
    sgdr_mult: int = 2
    lambda_e: float = 0.25
    lambda_h: float = 1.0
    # auxiliary pull of alpha0 toward the area-downsampled mask
    lambda_prior: float = 0.1
    alpha_min_steps: int = 300
    alpha_max_steps: int = 1200
    stabilization_window: int = 300
    stabilization_tol: float = 0.01
    eval_every: int = 100
    warmup_steps: int = 400
    alpha_lr_scale: float = 0.3
    bank_size: int = 8192
    val_size: int = 128
    max_feather: float = 0.15
    # regularisers found to over-constrain the model; off by default
    shift_l1_weight: float = 0.0
    cosine_hinge_weight: float = 0.0
    direct_weight: float = 0.0
    log_every: int = 100
    seed: int = 0


@dataclass
class TrainState:
    step: int = 0
    stage: str = "alpha_only"
    loss_weights: dict = field(default_factory=lambda: {"lambda_e": 0.0, "lambda_h": 0.0})
    ema: dict = field(default_factory=dict)
    stage_started: dict = field(default_factory=lambda: {"alpha_only": 0})

    def advance(self, stage: str) -> None:
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise StageRegression(f"cannot move from {self.stage} back to {stage}")
        if stage != self.stage:
            self.stage = stage
            self.stage_started[stage] = self.step


@dataclass
class CompositeBank:
    """Pre-encoded training composites: latents, decoded targets and masks."""

    z_a: torch.Tensor
    z_b: torch.Tensor
    z_t: torch.Tensor
    target: torch.Tensor
    masks: torch.Tensor

    def __len__(self) -> int:
        return len(self.z_a)

    def batch(self, idx: torch.Tensor) -> tuple[torch.Tensor, ...]:
        return self.z_a[idx], self.z_b[idx], self.z_t[idx], self.target[idx], self.masks[idx]


@torch.no_grad()
def build_bank(ae, images: np.ndarray, n: int, seed: int, max_feather: float = 0.15, chunk: int = 256) -> CompositeBank:
    rng = np.random.default_rng(seed)
    size = images.shape[-1]
    parts = {k: [] for k in ("z_a", "z_b", "z_t", "target", "masks")}
    for start in range(0, n, chunk):
        k = min(chunk, n - start)
        ia = rng.integers(len(images), size=k)
        ib = rng.integers(len(images), size=k)
        masks = torch.from_numpy(np.stack([sample_training_mask(rng, size, max_feather) for _ in range(k)]))
        x_a = torch.from_numpy(images[ia]).float()
        x_b = torch.from_numpy(images[ib]).float()
        z_t = ae.encode(compose_pixels(x_a, x_b, masks))
        parts["z_a"].append(ae.encode(x_a))
        parts["z_b"].append(ae.encode(x_b))
        parts["z_t"].append(z_t)
        parts["target"].append(ae.decode(z_t))
        parts["masks"].append(masks.float())
    return CompositeBank(**{k: torch.cat(v) for k, v in parts.items()})


def sgdr_factor(step: int, t0: int, mult: int, floor: float) -> float:
    """Cosine annealing with warm restarts, as a multiplier in [floor, 1]."""
    period, t = t0, step
    while t >= period:
        t -= period
        period *= mult
    return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * t / period))


def _val_perceptual(model: DecFormer, ae, bank: CompositeBank, halo_px: int) -> float:
    model.eval()
    with torch.no_grad():
        za, zb, zt, tgt, m = bank.batch(torch.arange(len(bank)))
        px, _, _ = halo_t(m, halo_px, ae.f)
        parts = pelc_loss(model(za, zb, m).apply(za, zb), zt, ae, px, 0.0, 0.0, target_px=tgt)
    model.train()
    return float(parts.perceptual)


def stabilized(history: list[tuple[int, float]], step: int, window: int, tol: float) -> bool:
    """True once validation perceptual loss improved by less than ``tol`` (relative) over ``window`` steps."""
    past = [v for s, v in history if s <= step - window]
    if not past:
        return False
    old, new = past[-1], history[-1][1]
    return (old - new) / max(abs(old), 1e-12) < tol


def train_decformer(
    ae,
    images: np.ndarray,
    cfg: DecformerConfig,
    train: DecformerTrainConfig,
    log_path: str | Path | None = None,
    bank: CompositeBank | None = None,
    val_bank: CompositeBank | None = None,
) -> tuple[DecFormer, list[dict]]:
    """Train on online-sampled composites (pre-encoded into a bank) with the staged schedule.

    Returns the model in eval mode and the JSON-lines log as a list of dicts.
    """
    gen = seed_everything(train.seed)
    if bank is None:
        bank = build_bank(ae, images, train.bank_size, train.seed, train.max_feather)
    if val_bank is None:
        val_bank = build_bank(ae, images, train.val_size, train.seed + 10_000, train.max_feather)
    grid = tuple(bank.z_a.shape[-2:])
    torch.manual_seed(cfg.seed)
    model = DecFormer(cfg, grid)
    shift_ids = {id(p) for p in model.shift_params()}
    groups = [
        {"params": model.alpha_params(), "name": "alpha"},
        {"params": [p for p in model.parameters() if id(p) in shift_ids], "name": "shift"},
    ]
    opt = torch.optim.AdamW(groups, lr=train.lr, weight_decay=train.weight_decay)
    state = TrainState()
    val_hist: list[tuple[int, float]] = []
    records: list[dict] = []
    sink = open(log_path, "w") if log_path else None
    model.train()
    try:
        for step in range(train.steps):
            state.step = step
            if state.stage == "alpha_only":
                if step > 0 and step % train.eval_every == 0:
                    val_hist.append((step, _val_perceptual(model, ae, val_bank, cfg.halo_px)))
                    done = step >= train.alpha_min_steps and stabilized(val_hist, step, train.stabilization_window, train.stabilization_tol)
                    if done or step >= train.alpha_max_steps:
                        state.advance("shift_warmup")
            if state.stage == "shift_warmup" and step - state.stage_started["shift_warmup"] >= train.warmup_steps:
                state.advance("joint")

            ramp = 0.0
            if state.stage == "shift_warmup":
                ramp = (step - state.stage_started["shift_warmup"] + 1) / train.warmup_steps
            elif state.stage == "joint":
                ramp = 1.0
            model.gate.fill_(ramp if cfg.shift_gate else 0.0)
            lam_h = ramp * train.lambda_h
            state.loss_weights = {"lambda_e": train.lambda_e, "lambda_h": lam_h}
            base = train.lr * sgdr_factor(step, train.sgdr_t0, train.sgdr_mult, train.lr_min_ratio)
            for g in opt.param_groups:
                scale = train.alpha_lr_scale if (g["name"] == "alpha" and state.stage == "shift_warmup") else 1.0
                g["lr"] = base * scale

            idx = torch.randint(len(bank), (train.batch_size,), generator=gen)
            za, zb, zt, tgt, m = bank.batch(idx)
            px, lat, m_lat = halo_t(m, cfg.halo_px, ae.f)
            prior = model.mask_prior(m)
            field_ = model(za, zb, m, prior=prior, halo_latent=lat, m_latent=m_lat)
            z_hat = field_.apply(za, zb)
            try:
                parts = pelc_loss(z_hat, zt, ae, px, train.lambda_e, lam_h, target_px=tgt)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"step {step} ({state.stage}): {exc}") from exc
            loss = parts.total
            if train.lambda_prior:
                target_a = m_lat.expand_as(prior.alpha0)
                loss = loss + train.lambda_prior * ((prior.alpha0 - target_a) ** 2).mean()
            if train.shift_l1_weight:
                loss = loss + train.shift_l1_weight * shift_l1(field_.shift, zt)
            if train.cosine_hinge_weight:
                loss = loss + train.cosine_hinge_weight * cosine_hinge(field_.shift, za, zb)
            if train.direct_weight:
                star = project_alpha_shift(za, zb, zt)
                loss = loss + train.direct_weight * direct_supervision(field_.alpha, field_.shift, star.alpha, star.shift)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            vals = parts.as_floats()
            for k, v in vals.items():
                state.ema[k] = v if k not in state.ema else 0.98 * state.ema[k] + 0.02 * v
            if step % train.log_every == 0 or step == train.steps - 1:
                rec = {"step": step, "stage": state.stage, **vals, "lambda_h": lam_h, "gate": float(model.gate), "lr": base}
                if val_hist and val_hist[-1][0] == step:
                    rec["val_perceptual"] = val_hist[-1][1]
                records.append(rec)
                if sink:
                    sink.write(json.dumps(rec, sort_keys=True) + "\n")
                    sink.flush()
                log.info("decformer %s", rec)
    finally:
        if sink:
            sink.close()
    model.eval()
    return model, records


def save_decformer(path, model: DecFormer, **extra) -> str:
    meta = {"kind": "decformer", "config": model.cfg.to_dict(), "grid": list(model.grid), **extra}
    return save_checkpoint(path, model.state_dict(), meta)


def load_decformer(path) -> DecFormer:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "decformer":
        raise ValueError(f"{path} does not hold a DecFormer")
    model = DecFormer(DecformerConfig.from_dict(meta["config"]), tuple(meta["grid"]))
    model.load_state_dict(tensors)
    model.gate.fill_(1.0 if model.cfg.shift_gate else 0.0)
    return model.eval()
