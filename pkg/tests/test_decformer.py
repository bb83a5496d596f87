import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pelc.autoencoder.model import AutoencoderConfig
from pelc.autoencoder.train import AETrainConfig, train_autoencoder
from pelc.data import compute_halo, edge_set, generate_mask, make_image_set
from pelc.decformer.analysis import Internals, ablation_configs, internals_visualization
from pelc.decformer.conditioning import edge_set_t, halo_t
from pelc.decformer.loss import NonFiniteLoss, pelc_loss
from pelc.decformer.model import DecFormer, DecformerConfig
from pelc.decformer.train import STAGES, DecformerTrainConfig, StageRegression, TrainState, build_bank, load_decformer, save_decformer, train_decformer

TINY = DecformerConfig(patch_sizes=(1, 1), hidden=8, width=8, heads=2, film_dims=8, prior_width=8, token_dim=8, fourier_bands=1)


@pytest.fixture(scope="module")
def tiny_ae():
    imgs = make_image_set(8, "train", 0, 16)
    ae, _ = train_autoencoder(imgs, AutoencoderConfig(widths=(8, 8, 8), groups=4, attention=False), AETrainConfig(steps=0, seed=0))
    return ae


def _inputs(batch=2, grid=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    za = torch.randn(batch, 4, grid, grid, generator=g, dtype=dtype)
    zb = torch.randn(batch, 4, grid, grid, generator=g, dtype=dtype)
    m = torch.from_numpy(np.stack([generate_mask(seed + i, (4 * grid, 4 * grid), "ellipse").data for i in range(batch)])).to(dtype)
    return za, zb, m


def test_default_model_size_in_desk_range():
    n = DecFormer(DecformerConfig()).n_params()
    assert 100_000 <= n <= 500_000


def test_patch_sizes_must_fit_grid():
    with pytest.raises(ValueError):
        DecFormer(DecformerConfig(patch_sizes=(4, 2, 1, 1)), grid=(6, 6))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 50))
def test_alpha_bounded_for_arbitrary_inputs(seed, scale):
    torch.manual_seed(0)
    model = DecFormer(DecformerConfig(seed=0)).eval()
    za, zb, m = _inputs(seed=seed)
    with torch.no_grad():
        f = model(za * scale, zb * scale, m)
    assert f.alpha.min() >= 0 and f.alpha.max() <= 1


def test_gate_zero_gives_exact_zero_shift():
    model = DecFormer(DecformerConfig()).eval()
    model.gate.fill_(0.0)
    za, zb, m = _inputs()
    f = model(za, zb, m)
    assert torch.count_nonzero(f.shift) == 0
    (f.alpha.sum()).backward()
    assert all(p.grad is None for p in model.shift_params())


def test_eval_forward_deterministic():
    torch.manual_seed(1)
    model = DecFormer(DecformerConfig()).eval()
    za, zb, m = _inputs()
    with torch.no_grad():
        a, b = model(za, zb, m), model(za, zb, m)
    assert torch.equal(a.alpha, b.alpha) and torch.equal(a.shift, b.shift)
    assert torch.equal(model.mask_prior(m).alpha0, model.mask_prior(m).alpha0)


def test_forward_validates_shapes():
    model = DecFormer(DecformerConfig())
    za, zb, m = _inputs()
    with pytest.raises(ValueError):
        model(za, zb, m[:, :16, :16])


def test_unconstrained_ablation_has_no_shift():
    cfg, train = ablation_configs("unconstrained_alpha_no_shift", DecformerConfig(), DecformerTrainConfig())
    model = DecFormer(cfg).eval()
    za, zb, m = _inputs()
    with torch.no_grad():
        f = model(za, zb, m)
    assert torch.count_nonzero(f.shift) == 0
    assert ablation_configs("no_halo_loss", DecformerConfig(), DecformerTrainConfig())[1].lambda_h == 0
    with pytest.raises(ValueError):
        ablation_configs("bogus", DecformerConfig(), DecformerTrainConfig())


@pytest.mark.parametrize("seed", [0, 3, 9])
def test_torch_halo_matches_numpy(seed):
    m = generate_mask(seed, (32, 32), "polygon").data
    px, lat, _ = halo_t(torch.from_numpy(m)[None], 4, 4)
    ref = compute_halo(m, 4, 4)
    np.testing.assert_allclose(px[0, 0].numpy(), ref.pixel, atol=1e-5)
    np.testing.assert_allclose(lat[0, 0].numpy(), ref.latent, atol=1e-5)
    np.testing.assert_array_equal(edge_set_t(torch.from_numpy(m)[None, None])[0, 0].numpy().astype(bool), edge_set(m))


# ---- loss -----------------------------------------------------------------------------------


def test_loss_zero_at_target(tiny_ae):
    z = torch.randn(2, 4, 4, 4)
    halo = torch.rand(2, 16, 16)
    parts = pelc_loss(z, z, tiny_ae, halo)
    assert all(v == 0 for v in parts.as_floats().values())


def test_loss_weights_select_perceptual(tiny_ae):
    z, zt = torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 4)
    parts = pelc_loss(z, zt, tiny_ae, torch.rand(2, 16, 16), lambda_e=0.0, lambda_h=0.0)
    vals = parts.as_floats()
    assert vals["total"] == pytest.approx(vals["perceptual"])


def test_loss_rejects_non_finite(tiny_ae):
    z = torch.randn(1, 4, 4, 4)
    z[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss):
        pelc_loss(z, torch.zeros_like(z), tiny_ae, torch.rand(1, 16, 16))


# ---- staged training ------------------------------------------------------------------------


def test_stage_state_refuses_regression():
    st_ = TrainState()
    st_.advance("shift_warmup")
    st_.advance("joint")
    with pytest.raises(StageRegression):
        st_.advance("alpha_only")


def test_staged_training_log_and_checkpoint(tmp_path, tiny_ae):
    imgs = make_image_set(16, "train", 0, 16)
    train = DecformerTrainConfig(
        steps=14, batch_size=4, bank_size=32, val_size=4, alpha_min_steps=2, alpha_max_steps=4, stabilization_window=2,
        eval_every=2, warmup_steps=4, sgdr_t0=4, log_every=1,
    )
    model, records = train_decformer(tiny_ae, imgs, TINY, train, log_path=tmp_path / "log.jsonl")
    stages = [r["stage"] for r in records]
    seq = [s for i, s in enumerate(stages) if i == 0 or stages[i - 1] != s]
    assert seq == list(STAGES)
    assert all(r["gate"] == 0.0 for r in records if r["stage"] == "alpha_only")
    assert all(r["lambda_h"] == 0.0 for r in records if r["stage"] == "alpha_only")
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == json.loads(json.dumps(records))
    save_decformer(tmp_path / "d.safetensors", model)
    back = load_decformer(tmp_path / "d.safetensors")
    za, zb, m = _inputs(batch=1, grid=4)
    with torch.no_grad():
        assert torch.equal(model(za, zb, m).alpha, back(za, zb, m).alpha)


def test_bank_holds_decoded_targets(tiny_ae):
    bank = build_bank(tiny_ae, make_image_set(4, "train", 0, 16), 6, seed=0)
    assert len(bank) == 6
    with torch.no_grad():
        torch.testing.assert_close(bank.target, tiny_ae.decode(bank.z_t))


def test_internals_heuristic_panel_has_zero_channel_variance():
    model = DecFormer(DecformerConfig()).eval()
    za, zb, m = _inputs(batch=1)
    it = internals_visualization(model, za[0], zb[0], 0.5 * (za[0] + zb[0]), m[0].numpy(), 4)
    assert isinstance(it, Internals)
    assert it.channel_variance("heuristic_alpha") == 0.0
    assert it.alpha.shape == (4, 8, 8) and it.halo_latent.shape == (8, 8)
