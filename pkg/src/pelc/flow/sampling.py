"""Euler sampling for the rectified flow, with heuristic and z0-retargeted inpainting.

Convention: ``z_t = (1 - t) z0 + t eps`` and the network regresses
``v = eps - z0``, so ``dz/dt = v``, ``z0 = z_t - t v`` and sampling integrates
from t=1 down to t=0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ..compositor.blend import BlendField, heuristic_blend


@dataclass
class FlowState:
    z_t: torch.Tensor
    t: float
    schedule: list[float] = field(default_factory=list)
    step_index: int = 0


def uniform_schedule(steps: int = 30) -> list[float]:
    """``steps + 1`` strictly decreasing times from 1 to 0."""
    if steps < 1:
        raise ValueError("need at least one step")
    return [1.0 - i / steps for i in range(steps)] + [0.0]


def noised(z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    return (1 - t) * z0 + t * eps


def flow_step(state: FlowState, v: torch.Tensor, t_next: float) -> FlowState:
    """Euler update ``z_{t'} = z_t + (t' - t) v``."""
    if t_next > state.t:
        raise ValueError(f"t' = {t_next} must not exceed t = {state.t}")
    if t_next == state.t:
        return FlowState(state.z_t, state.t, state.schedule, state.step_index)
    return FlowState(state.z_t + (t_next - state.t) * v, t_next, state.schedule, state.step_index + 1)


# (z0_theta, z0_ref, keep mask [B,H,W]) -> BlendField
Compositor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], BlendField]


def retargeted_step(
    state: FlowState,
    v: torch.Tensor,
    z0_ref: torch.Tensor,
    keep: torch.Tensor,
    compositor: Compositor,
    t_next: float,
    z_model: torch.Tensor | None = None,
    sigma=None,
) -> tuple[FlowState, BlendField]:
    """Estimate z0, composite it with the reference, and re-aim the velocity at the result.

    ``keep`` is 1 where the reference is kept. ``z_model``/``sigma`` describe
    the network input when it differs from the state (dual-sigma inference);
    by default z0 is estimated from the state itself at level t.
    """
    t = state.t
    if t <= 0:
        raise ValueError("retargeting needs t > 0")
    if t_next > t:
        raise ValueError(f"t' = {t_next} must not exceed t = {t}")
    z_in = state.z_t if z_model is None else z_model
    z0_theta = z_in - (t if sigma is None else sigma) * v
    blend = compositor(z0_theta, z0_ref, keep)
    z0_star = (1 - blend.alpha) * z0_theta + blend.alpha * z0_ref + blend.shift
    if t_next == 0:
        return FlowState(z0_star, 0.0, state.schedule, state.step_index + 1), blend
    # algebraically (z_t - z0*) / t; written as a correction of v so that a
    # zero blend reproduces the plain Euler step bit for bit
    v_star = v - (z0_star - z0_theta) / t if z_model is None and sigma is None else (state.z_t - z0_star) / t
    return FlowState(state.z_t + (t_next - t) * v_star, t_next, state.schedule, state.step_index + 1), blend


def heuristic_compositor(f: int, method: str = "area") -> Compositor:
    def comp(z0_theta, z0_ref, keep):
        ones = torch.ones_like(z0_theta)
        alpha = heuristic_blend(torch.zeros_like(z0_theta), ones, keep, f, method)
        return BlendField(alpha, torch.zeros_like(z0_theta))

    return comp


def decformer_compositor(model) -> Compositor:
    prior_cache: dict[int, object] = {}

    @torch.no_grad()
    def comp(z0_theta, z0_ref, keep):
        key = id(keep)
        if key not in prior_cache:
            prior_cache.clear()
            prior_cache[key] = (keep, model.mask_prior(keep if keep.dim() == 4 else keep[:, None]))
        return model(z0_theta, z0_ref, keep, prior=prior_cache[key][1])

    return comp


def dual_sigma_levels(u, lam: float, g: Callable = lambda x: x):
    """``(sigma_in, sigma_out) = (g(u), g(lam u))``."""
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    return g(u), g(lam * u)


def snr(sigma):
    return ((1 - sigma) / sigma) ** 2


def dual_sigma_corrupt(
    z0: torch.Tensor,
    m_latent: torch.Tensor,
    u,
    lam: float = 0.75,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    g: Callable = lambda x: x,
    independent: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise the masked region at ``g(u)`` and the context at ``g(lam u)``.

    ``m_latent`` is 1 on the region to be generated. Returns the corrupted
    latent and the per-site sigma field ``m sigma_in + (1 - m) sigma_out``.
    Both regions share one noise draw unless ``independent``.
    """
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    u = torch.as_tensor(u, dtype=z0.dtype)
    if torch.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in (0, 1)")
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    m = m_latent if m_latent.dim() == 4 else m_latent[:, None] if m_latent.dim() == 3 else m_latent[None, None]
    m = m.to(z0.dtype)
    s_in, s_out = dual_sigma_levels(u, lam, g)
    shape = (-1, 1, 1, 1)
    s_in, s_out = s_in.reshape(shape) if s_in.dim() else s_in, s_out.reshape(shape) if s_out.dim() else s_out
    z_in = noised(z0, eps, s_in)
    eps_out = torch.randn(z0.shape, generator=generator, dtype=z0.dtype) if independent else eps
    z_out = noised(z0, eps_out, s_out)
    sigma = m * s_in + (1 - m) * s_out
    return m * z_in + (1 - m) * z_out, sigma.expand_as(z0)


@dataclass
class InpaintResult:
    z0: torch.Tensor
    image: torch.Tensor
    diagnostics: list[dict]


@torch.no_grad()
def inpaint(
    ae,
    flow,
    image: torch.Tensor,
    mask: torch.Tensor,
    sampler: str = "heuristic_per_step",
    compositor=None,
    steps: int = 30,
    seed: int = 0,
    dual_sigma_lambda: float | None = None,
    noise: torch.Tensor | None = None,
) -> InpaintResult:
    """Regenerate ``mask == 1`` of ``image`` (batched [B,3,H,W], masks [B,H,W]).

    ``heuristic_per_step`` blends the reference, noised to the current level
    with the shared noise draw, into the state after every Euler step.
    ``decformer_retarget`` composites clean-latent estimates with
    ``compositor`` (a DecFormer or any :data:`Compositor`). With
    ``dual_sigma_lambda`` the context seen by the network is noised at
    ``lambda t`` instead of ``t``.
    """
    if flow is None or ae is None:
        raise ValueError("inpainting needs trained flow and autoencoder checkpoints")
    if image.dim() == 3:
        image, mask = image[None], mask[None] if mask.dim() == 2 else mask
    mask = mask.to(image.dtype)
    if mask.dim() == 4:
        mask = mask[:, 0]
    z_ref = ae.encode(image)
    if noise is None:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(z_ref.shape, generator=gen, dtype=z_ref.dtype)
    f = ae.f
    m_lat = torch.nn.functional.avg_pool2d(mask[:, None], f) if f > 1 else mask[:, None]
    keep = 1 - mask
    sched = uniform_schedule(steps)
    state = FlowState(noise.clone(), sched[0], sched, 0)
    lam = dual_sigma_lambda
    diags = []
    if sampler == "decformer_retarget":
        if compositor is None:
            raise ValueError("decformer_retarget needs a compositor checkpoint")
        comp = decformer_compositor(compositor) if isinstance(compositor, torch.nn.Module) else compositor
    elif sampler != "heuristic_per_step":
        raise ValueError(f"unknown sampler {sampler!r}")
    level = 1.0 if lam is None else lam
    if sampler == "heuristic_per_step" and lam is not None:
        state.z_t = heuristic_blend(noised(z_ref, noise, lam), state.z_t, mask, f)
    for t_next in sched[1:]:
        t = state.t
        if sampler == "heuristic_per_step":
            # the blended state already carries the context at level lam*t
            v = flow(state.z_t, torch.full((len(state.z_t),), t, dtype=state.z_t.dtype))
            state = flow_step(state, v, t_next)
            state.z_t = heuristic_blend(noised(z_ref, noise, level * t_next), state.z_t, mask, f)
            rec = {"t": t, "mean_abs_v": float(v.abs().mean()), "blend_mean_m": float(m_lat.mean())}
        else:
            if lam is None:
                v = flow(state.z_t, torch.full((len(state.z_t),), t, dtype=state.z_t.dtype))
                state, blend = retargeted_step(state, v, z_ref, keep, comp, t_next)
            else:
                z_in = m_lat * state.z_t + (1 - m_lat) * noised(z_ref, noise, lam * t)
                sigma = m_lat * t + (1 - m_lat) * lam * t
                v = flow(z_in, torch.full((len(z_in),), t, dtype=z_in.dtype))
                state, blend = retargeted_step(state, v, z_ref, keep, comp, t_next, z_model=z_in, sigma=sigma)
            rec = {"t": t, "mean_abs_v": float(v.abs().mean()), "mean_alpha": float(blend.alpha.mean()),
                   "mean_abs_shift": float(blend.shift.abs().mean())}
        diags.append(rec)
    return InpaintResult(state.z_t, ae.decode(state.z_t).clamp(0, 1), diags)


@torch.no_grad()
def sample(flow, shape, steps: int = 30, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen)
    sched = uniform_schedule(steps)
    state = FlowState(z, sched[0], sched)
    for t_next in sched[1:]:
        v = flow(state.z_t, torch.full((shape[0],), state.t))
        state = flow_step(state, v, t_next)
    return state.z_t


def pearson(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.flatten().double()
    b = b.flatten().double()
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / (a.norm() * b.norm() + 1e-12))


def numpy_mask(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m), np.float32)
