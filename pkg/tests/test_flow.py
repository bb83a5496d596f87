import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pelc.autoencoder.model import identity_autoencoder
from pelc.compositor.blend import BlendField
from pelc.data import generate_mask
from pelc.flow import (
    FinetuneConfig,
    FlowConfig,
    FlowNet,
    FlowState,
    FlowTrainConfig,
    add_lora,
    dual_sigma_corrupt,
    finetune_dual_sigma,
    flow_step,
    inpaint,
    load_flow,
    merge_lora,
    retargeted_step,
    save_flow,
    train_flow,
    uniform_schedule,
)
from pelc.flow.sampling import dual_sigma_levels, heuristic_compositor, noised, sample, snr

SMALL = FlowConfig(width=16, depth=2, heads=2, time_dim=16)


def _fixed(alpha: float, shift: float = 0.0):
    def comp(z0_theta, z0_ref, keep):
        return BlendField(torch.full_like(z0_theta, alpha), torch.full_like(z0_theta, shift))

    return comp


class PointFlow(torch.nn.Module):
    """Exact velocity field for a dataset holding the single latent ``z0``."""

    def __init__(self, z0: torch.Tensor) -> None:
        super().__init__()
        self.z0 = z0

    def forward(self, z, t):
        t = torch.as_tensor(t, dtype=z.dtype).reshape(-1, 1, 1, 1)
        return (z - self.z0) / t


def test_schedule_shape():
    s = uniform_schedule(4)
    assert s == [1.0, 0.75, 0.5, 0.25, 0.0]
    with pytest.raises(ValueError):
        uniform_schedule(0)


def test_flow_step_examples():
    z = torch.ones(1, 4, 2, 2)
    v = torch.full_like(z, 2.0)
    out = flow_step(FlowState(z, 0.5), v, 0.25)
    torch.testing.assert_close(out.z_t, torch.full_like(z, 0.5))
    assert out.t == 0.25 and out.step_index == 1
    assert torch.equal(flow_step(FlowState(z, 0.5), v, 0.5).z_t, z)
    with pytest.raises(ValueError):
        flow_step(FlowState(z, 0.5), v, 0.75)


def test_zero_blend_reproduces_euler_bitwise():
    g = torch.Generator().manual_seed(0)
    z, v, ref = (torch.randn(2, 4, 8, 8, generator=g) for _ in range(3))
    state = FlowState(z, 0.6)
    plain = flow_step(state, v, 0.4)
    retarget, _ = retargeted_step(state, v, ref, torch.ones(2, 32, 32), _fixed(0.0), 0.4)
    assert torch.equal(plain.z_t, retarget.z_t)


def test_full_keep_lands_on_reference_trajectory():
    g = torch.Generator().manual_seed(1)
    ref, eps, v = (torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))
    state = FlowState(noised(ref, eps, 0.7), 0.7)
    out, _ = retargeted_step(state, v, ref, torch.ones(1, 32, 32), _fixed(1.0), 0.3)
    torch.testing.assert_close(out.z_t, noised(ref, eps, 0.3))


def test_final_step_returns_composited_estimate():
    g = torch.Generator().manual_seed(2)
    z, v, ref = (torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))
    out, _ = retargeted_step(FlowState(z, 0.25), v, ref, torch.ones(1, 32, 32), _fixed(0.5, 0.1), 0.0)
    z0_theta = z - 0.25 * v
    torch.testing.assert_close(out.z_t, 0.5 * z0_theta + 0.5 * ref + 0.1)
    assert out.t == 0.0
    with pytest.raises(ValueError):
        retargeted_step(FlowState(z, 0.0), v, ref, torch.ones(1, 32, 32), _fixed(0.5), 0.0)


def test_heuristic_compositor_zero_keep_is_plain_step():
    z, v = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
    comp = heuristic_compositor(4)
    out, blend = retargeted_step(FlowState(z, 0.5), v, torch.randn_like(z), torch.zeros(1, 32, 32), comp, 0.25)
    assert torch.count_nonzero(blend.alpha) == 0
    assert torch.equal(out.z_t, flow_step(FlowState(z, 0.5), v, 0.25).z_t)


def test_point_flow_sampling_is_exact():
    z0 = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    state = FlowState(torch.randn(1, 4, 8, 8, dtype=torch.float64), 1.0)
    sched = uniform_schedule(7)
    flow = PointFlow(z0)
    for t_next in sched[1:]:
        state = flow_step(state, flow(state.z_t, state.t), t_next)
    torch.testing.assert_close(state.z_t, z0)


# ---- dual sigma -----------------------------------------------------------------------------


def test_dual_sigma_worked_example():
    s_in, s_out = dual_sigma_levels(0.4, 0.75)
    assert s_in == pytest.approx(0.4) and s_out == pytest.approx(0.3)
    assert snr(s_in) == pytest.approx(2.25)
    assert snr(s_out) == pytest.approx(49 / 9)


@settings(max_examples=10_000, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.05, 0.95))
def test_context_always_cleaner_than_region(u, lam):
    s_in, s_out = dual_sigma_levels(u, lam)
    assert s_out < s_in
    assert snr(s_out) > snr(s_in)


def test_dual_sigma_corrupt_levels():
    g = torch.Generator().manual_seed(0)
    z0, eps = torch.randn(2, 4, 8, 8, generator=g), torch.randn(2, 4, 8, 8, generator=g)
    m = torch.zeros(2, 1, 8, 8)
    m[..., :4] = 1
    z, sigma = dual_sigma_corrupt(z0, m, torch.tensor([0.4, 0.8]), 0.5, eps=eps)
    torch.testing.assert_close(z[0, :, :, :4], noised(z0, eps, 0.4)[0, :, :, :4])
    torch.testing.assert_close(z[0, :, :, 4:], noised(z0, eps, 0.2)[0, :, :, 4:])
    torch.testing.assert_close(z[1, :, :, 4:], noised(z0, eps, 0.4)[1, :, :, 4:])
    assert float(sigma[1, 0, 0, 0]) == pytest.approx(0.8) and float(sigma[1, 0, 0, 7]) == pytest.approx(0.4)


@pytest.mark.parametrize("u,lam", [(0.0, 0.5), (1.0, 0.5), (0.5, 1.0), (0.5, 0.0)])
def test_dual_sigma_rejects_bad_levels(u, lam):
    with pytest.raises(ValueError):
        dual_sigma_corrupt(torch.zeros(1, 4, 2, 2), torch.ones(1, 1, 2, 2), u, lam)


# ---- training and adapters ------------------------------------------------------------------


def test_train_flow_reduces_loss_and_roundtrips(tmp_path):
    lat = torch.randn(32, 4, 8, 8) * 0.5 + 1.0
    model, hist = train_flow(lat, SMALL, FlowTrainConfig(steps=60, batch_size=16, log_every=20))
    assert hist[-1]["loss"] < hist[0]["loss"]
    save_flow(tmp_path / "f.safetensors", model)
    back = load_flow(tmp_path / "f.safetensors")
    z = torch.randn(2, 4, 8, 8)
    with torch.no_grad():
        assert torch.equal(model(z, 0.3), back(z, 0.3))
    with pytest.raises(ValueError):
        train_flow(lat[:0], SMALL, FlowTrainConfig(steps=1))


def test_zero_step_finetune_is_exact_copy():
    torch.manual_seed(0)
    base = FlowNet(SMALL)
    tuned, hist = finetune_dual_sigma(base, torch.randn(8, 4, 8, 8), FinetuneConfig(steps=0), 4, 32)
    assert hist == []
    assert tuned is not base
    for (k, v), w in zip(base.state_dict().items(), tuned.state_dict().values()):
        assert torch.equal(v, w), k


def test_lora_merge_preserves_function():
    torch.manual_seed(0)
    model = FlowNet(SMALL).double()
    wrapped = add_lora(model, 4)
    assert wrapped and all(not p.requires_grad for n, p in model.named_parameters() if ".A" not in n and ".B" not in n)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.endswith(".B"):
                p.normal_(0, 0.05)
    z = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    before = model(z, 0.4)
    merged = merge_lora(model)
    assert not any(".A" in n for n, _ in merged.named_parameters())
    torch.testing.assert_close(merged(z, 0.4), before, rtol=1e-10, atol=1e-10)


def test_short_finetune_changes_weights_and_stays_plain():
    torch.manual_seed(0)
    base = FlowNet(SMALL)
    tuned, hist = finetune_dual_sigma(base, torch.randn(16, 4, 8, 8), FinetuneConfig(steps=3, batch_size=4, mask_bank=8, log_every=1), 4, 32)
    assert len(hist) == 3
    assert set(tuned.state_dict()) == set(base.state_dict())
    assert any(not torch.equal(a, b) for a, b in zip(base.state_dict().values(), tuned.state_dict().values()))


# ---- inpainting ---------------------------------------------------------------------------


@pytest.fixture()
def scene():
    ae = identity_autoencoder(1)
    img = torch.rand(1, 3, 32, 32)
    mask = torch.from_numpy((generate_mask(4, (32, 32), "ellipse").data >= 0.5).astype(np.float32))[None]
    return ae, img, mask


@pytest.mark.parametrize("lam", [None, 0.75])
def test_heuristic_inpaint_preserves_kept_pixels(scene, lam):
    ae, img, mask = scene
    res = inpaint(ae, PointFlow(torch.zeros(1, 3, 32, 32)), img, mask, steps=5, dual_sigma_lambda=lam)
    keep = mask[0] == 0
    torch.testing.assert_close(res.image[0][:, keep], img[0][:, keep])
    assert len(res.diagnostics) == 5


def test_point_flow_inpaint_recovers_image(scene):
    ae, img, mask = scene
    flow = PointFlow(ae.encode(img))
    for sampler, comp in (("heuristic_per_step", None), ("decformer_retarget", heuristic_compositor(1))):
        res = inpaint(ae, flow, img, mask, sampler=sampler, compositor=comp, steps=6)
        torch.testing.assert_close(res.image, img)


def test_inpaint_rejects_missing_pieces(scene):
    ae, img, mask = scene
    with pytest.raises(ValueError):
        inpaint(ae, None, img, mask)
    with pytest.raises(ValueError):
        inpaint(ae, PointFlow(img), img, mask, sampler="decformer_retarget")
    with pytest.raises(ValueError):
        inpaint(ae, PointFlow(img), img, mask, sampler="ddim")


def test_sampling_seeded():
    torch.manual_seed(0)
    flow = FlowNet(SMALL).eval()
    with torch.no_grad():
        assert torch.equal(sample(flow, (1, 4, 8, 8), steps=3, seed=5), sample(flow, (1, 4, 8, 8), steps=3, seed=5))
