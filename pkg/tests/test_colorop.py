import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pelc.autoencoder.model import identity_autoencoder
from pelc.colorop import (
    ColorOpConfig,
    ColorOperator,
    ColorParams,
    ColorTrainConfig,
    apply_color_latents_naive,
    apply_color_pixels,
    load_color_operator,
    save_color_operator,
    train_color_operator,
)
from pelc.colorop.evaluate import evaluate_color
from pelc.colorop.ops import normalised_latent_range, sample_params
from pelc.compositor import PSNR_SENTINEL
from pelc.data import make_image_set


@pytest.mark.parametrize(
    "x,p,y",
    [
        (0.25, ColorParams(gamma=2.0), 0.5),
        (0.75, ColorParams(contrast=2.0), 1.0),
        (0.5, ColorParams(contrast=0.5, brightness=0.1), 0.6),
        (0.9, ColorParams(brightness=0.2), 1.0),
        (0.05, ColorParams(brightness=-0.2), 0.0),
    ],
)
def test_pixel_transform_examples(x, p, y):
    assert float(apply_color_pixels(torch.tensor([x], dtype=torch.float64), p)) == pytest.approx(y)


def test_unclamped_values_escape_unit_range():
    out = apply_color_pixels(torch.tensor([1.0]), ColorParams(contrast=2.0, brightness=0.1), clamp=False)
    assert float(out) == pytest.approx(1.6)


def test_identity_parameters_are_exact():
    x = torch.rand(3, 3, 16, 16)
    assert torch.equal(apply_color_pixels(x, ColorParams()), x)
    assert torch.equal(apply_color_pixels(x, torch.zeros(3, 3)), x)
    assert ColorParams().is_identity and not ColorParams(gamma=1.5).is_identity
    lo, hi = -torch.ones(1, 3, 1, 1), torch.ones(1, 3, 1, 1)
    z = torch.randn(3, 3, 8, 8)
    assert torch.equal(apply_color_latents_naive(z, ColorParams(), lo, hi), z)


def test_parameter_validation():
    with pytest.raises(ValueError):
        ColorParams(gamma=0.0)
    with pytest.raises(ValueError):
        ColorParams(contrast=-1.0)


def test_vector_and_dataclass_forms_agree():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    p = ColorParams(1.7, 0.8, -0.05)
    cond = torch.tensor([p.conditioning()] * 2, dtype=torch.float64)
    torch.testing.assert_close(apply_color_pixels(x, cond), apply_color_pixels(x, p))
    lo, hi = torch.zeros(1, 3, 1, 1), torch.ones(1, 3, 1, 1)
    torch.testing.assert_close(apply_color_latents_naive(x, cond, lo, hi), apply_color_latents_naive(x, p, lo, hi))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 1),
    st.floats(1 / 3, 3),
    st.floats(0.5, 2),
    st.floats(-0.2, 0.2),
    st.floats(-0.2, 0.2),
)
def test_monotone_in_brightness(x, gamma, contrast, b1, b2):
    lo, hi = sorted((b1, b2))
    t = torch.tensor([x], dtype=torch.float64)
    assert float(apply_color_pixels(t, ColorParams(gamma, contrast, lo))) <= float(apply_color_pixels(t, ColorParams(gamma, contrast, hi)))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(1 / 3, 3), st.floats(0.5, 2))
def test_monotone_in_input(x1, x2, gamma, contrast):
    lo, hi = sorted((x1, x2))
    p = ColorParams(gamma, contrast, 0.0)
    assert float(apply_color_pixels(torch.tensor([lo]), p)) <= float(apply_color_pixels(torch.tensor([hi]), p))


def test_naive_on_unit_latent_range_is_pixel_transform():
    # with raw values already in [0, 1] the naive operator is the unclamped pixel formula
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    p = ColorParams(2.0, 1.3, 0.05)
    out = apply_color_latents_naive(x, p, torch.zeros(1, 3, 1, 1), torch.ones(1, 3, 1, 1))
    torch.testing.assert_close(out, apply_color_pixels(x, p, clamp=False))


def test_naive_odd_extension_outside_range():
    lo, hi = torch.zeros(1, 1, 1, 1), torch.ones(1, 1, 1, 1)
    z = torch.tensor([-0.25]).reshape(1, 1, 1, 1)
    out = apply_color_latents_naive(z, ColorParams(gamma=2.0), lo, hi)
    assert float(out) == pytest.approx(-0.5)


def test_sample_params_ranges():
    c = sample_params(np.random.default_rng(0), 2000)
    assert c.shape == (2000, 3)
    assert np.abs(c[:, 0]).max() <= np.log(3) and np.abs(c[:, 1]).max() <= np.log(2) and np.abs(c[:, 2]).max() <= 0.2


def test_fresh_operator_is_identity():
    model = ColorOperator(ColorOpConfig())
    z = torch.randn(2, 4, 8, 8)
    assert torch.equal(model(z, torch.tensor([0.3, -0.2, 0.1])), z)


def test_training_and_checkpoint(tmp_path):
    ae = identity_autoencoder(4, in_channels=3)
    imgs = make_image_set(16, "train", 0)
    cfg = ColorOpConfig(latent_channels=48, width=8, depth=1, heads=2, cond_dim=8)
    model, hist = train_color_operator(ae, imgs, cfg, ColorTrainConfig(steps=80, batch_size=16, bank_size=32, lr=3e-3, log_every=40))
    assert len(hist) == 2 and hist[-1]["loss"] < hist[0]["loss"]
    save_color_operator(tmp_path / "c.safetensors", model)
    back = load_color_operator(tmp_path / "c.safetensors")
    z = torch.randn(1, 48, 8, 8)
    cond = torch.tensor([0.2, 0.1, 0.0])
    with torch.no_grad():
        assert torch.equal(model(z, cond), back(z, cond))


def test_identity_setting_scores_perfectly_with_identity_autoencoder():
    ae = identity_autoencoder(1)
    ae.latent_min.fill_(0.0)
    ae.latent_max.fill_(1.0)
    lo, hi = normalised_latent_range(ae)
    assert torch.equal(lo, torch.zeros_like(lo)) and torch.equal(hi, torch.ones_like(hi))
    imgs = make_image_set(4, "heldout", 0)
    model = ColorOperator(ColorOpConfig(latent_channels=3, width=8, depth=1, heads=2, cond_dim=8, grid=(32, 32))).eval()
    table = evaluate_color(ae, model, imgs, grid=(ColorParams(), ColorParams(gamma=2.0)))
    first, second = table.per_setting
    assert first["model_psnr_db"] == PSNR_SENTINEL and first["naive_psnr_db"] == PSNR_SENTINEL
    # gamma keeps pixels inside [0, 1], so the naive operator is exact here too
    assert second["naive_psnr_db"] == PSNR_SENTINEL
    assert second["model_psnr_db"] < 40
    assert "model" in table.summary() and table.to_csv().startswith("method,")
    with pytest.raises(ValueError):
        evaluate_color(ae, model, imgs[:0])
