import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from pelc.autoencoder.erf import (
    bootstrap_ci,
    cumulative_energy_radius,
    energy_curve,
    erf_probe_decoder,
    erf_probe_encoder,
    erf_probe_gradient,
    patch_radius_fraction,
)
from pelc.autoencoder.model import AutoencoderConfig, identity_autoencoder
from pelc.autoencoder.receptive import (
    LayerSpec,
    analytic_influence_field,
    analytic_receptive_field,
    autoencoder_layer_specs,
    bundled_specs,
    influence_field_expanded,
    influence_field_table,
    receptive_field_table,
)
from pelc.autoencoder.train import AETrainConfig, train_autoencoder
from pelc.data import make_image_set

# published FLUX autoencoder layer stack, cumulative column per block
ENCODER_ROWS = [3, 13, 33, 73, 137, 201, 217]
DECODER_INFLUENCE_ROWS = [3, 11, 50, 156, 424, 520, 536]
DECODER_RF_ROWS = [Fraction(3), Fraction(11), Fraction(24), Fraction(61, 2), Fraction(135, 4), Fraction(141, 4), Fraction(71, 2)]
DECODER_RF_SUMS = [2, 8, 13, Fraction(13, 2), Fraction(13, 4), Fraction(3, 2), Fraction(1, 4)]


def test_flux_encoder_table_exact():
    rows = receptive_field_table(bundled_specs("flux_encoder"))
    assert [r.cumulative for r in rows] == ENCODER_ROWS
    assert [r.layer_sum for r in rows] == [2, 10, 20, 40, 64, 64, 16]
    assert [r.effective_stride for r in rows] == [1, 1, 2, 4, 8, 8, 8]
    assert analytic_receptive_field(bundled_specs("flux_encoder")) == 217


def test_flux_decoder_influence_table_exact():
    rows = influence_field_table(bundled_specs("flux_decoder"))
    assert [r.cumulative for r in rows] == DECODER_INFLUENCE_ROWS
    assert [r.layer_sum for r in rows] == [2, 8, 16, 32, 64, 96, 16]
    assert [r.upscale for r in rows] == [1, 1, 2, 2, 2, 1, 1]
    assert analytic_influence_field(bundled_specs("flux_decoder")) == 536


def test_flux_decoder_receptive_table_exact():
    rows = receptive_field_table(bundled_specs("flux_decoder"))
    assert [r.cumulative for r in rows] == DECODER_RF_ROWS
    assert [r.layer_sum for r in rows] == DECODER_RF_SUMS
    assert analytic_receptive_field(bundled_specs("flux_decoder")) == Fraction(71, 2)


def test_single_conv():
    assert analytic_receptive_field([LayerSpec("conv", 3)]) == 3


@given(st.lists(st.sampled_from([1, 2]), min_size=1, max_size=6))
def test_pointwise_layers_give_product_of_upscales(ups):
    layers = [LayerSpec(f"l{i}", 1, Fraction(1, u), u) for i, u in enumerate(ups)]
    assert analytic_influence_field(layers) == math.prod(ups)


@pytest.mark.parametrize("f", [1, 2, 4, 8])
def test_toy_influence_recurrence_matches_expansion(f):
    widths = tuple([16] * (int(math.log2(f)) + 1))
    specs = autoencoder_layer_specs(AutoencoderConfig(f=f, widths=widths), "decoder")
    assert analytic_influence_field(specs) == influence_field_expanded(specs)


def test_layerspec_validation():
    with pytest.raises(ValueError):
        LayerSpec("bad", 0)
    with pytest.raises(ValueError):
        LayerSpec("bad", 3, Fraction(0))


def test_identity_autoencoder_exact_roundtrip():
    ae = identity_autoencoder(1)
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(ae.decode(ae.encode(x)), x)
    ae4 = identity_autoencoder(4)
    assert ae4.encode(x).shape == (2, 48, 4, 4)
    torch.testing.assert_close(ae4.decode(ae4.encode(x)), x, rtol=0, atol=1e-6)


def test_toy_latent_shape():
    ae, _ = train_autoencoder(make_image_set(4, "train", 0), AutoencoderConfig(widths=(8, 8, 8), groups=4), AETrainConfig(steps=0))
    assert ae.encode(torch.rand(1, 3, 32, 32)).shape == (1, 4, 8, 8)
    with pytest.raises(ValueError):
        ae.encode(torch.rand(1, 3, 30, 30))


def test_zero_steps_equals_initialisation():
    cfg = AutoencoderConfig(widths=(8, 8, 8), groups=4)
    imgs = make_image_set(4, "train", 0)
    a, hist = train_autoencoder(imgs, cfg, AETrainConfig(steps=0, seed=3))
    b, _ = train_autoencoder(imgs, cfg, AETrainConfig(steps=0, seed=3))
    assert hist == []
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k


def test_training_bitwise_deterministic():
    cfg = AutoencoderConfig(widths=(8, 8, 8), groups=4, attention=False)
    imgs = make_image_set(16, "train", 0)
    train = AETrainConfig(steps=3, batch_size=4, log_every=3, seed=1)
    a, ha = train_autoencoder(imgs, cfg, train)
    b, hb = train_autoencoder(imgs, cfg, train)
    assert ha == hb
    for v, w in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(v, w)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((0, 3, 32, 32), np.float32), AutoencoderConfig(), AETrainConfig(steps=1))


# ---- probes -------------------------------------------------------------------------


def test_identity_decoder_probe_is_patch_local():
    ae = identity_autoencoder(4)
    z = ae.encode(torch.rand(1, 3, 32, 32))
    e = erf_probe_decoder(ae, z, (2, 5), 1e-3)
    support = np.argwhere(e > 0)
    assert support[:, 0].min() == 8 and support[:, 0].max() == 11
    assert support[:, 1].min() == 20 and support[:, 1].max() == 23


def test_zero_perturbations_give_zero_maps():
    ae = identity_autoencoder(4)
    x = torch.rand(1, 3, 32, 32)
    assert not erf_probe_decoder(ae, ae.encode(x), (0, 0), 0.0).any()
    assert not erf_probe_encoder(ae, x, (3, 3), 0.0).any()
    with pytest.raises(ValueError):
        erf_probe_decoder(ae, ae.encode(x), (0, 0), -1.0)


def test_identity_encoder_probe_single_site():
    ae = identity_autoencoder(4)
    e = erf_probe_encoder(ae, torch.rand(1, 3, 32, 32), (13, 6), 0.05)
    assert np.count_nonzero(e) == 1 and e[3, 1] > 0


def test_identity_gradient_support_and_linearity():
    ae = identity_autoencoder(4)
    z = ae.encode(torch.rand(1, 3, 32, 32)).double()
    g = erf_probe_gradient(ae, z, (9, 9), 5)
    assert set(map(tuple, np.argwhere(g > 0))) <= {(i, j) for i in (2, 3) for j in (2, 3)}
    # linear decoder: the map is 2 J^T y, so doubling z doubles it exactly
    np.testing.assert_allclose(erf_probe_gradient(ae, 2 * z, (9, 9), 5), 2 * g, rtol=1e-12)


def test_probe_bounds_checked():
    ae = identity_autoencoder(4)
    z = ae.encode(torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError):
        erf_probe_decoder(ae, z, (8, 0))
    with pytest.raises(ValueError):
        erf_probe_gradient(ae, z, (30, 30), 5)


def test_delta_energy_has_zero_radius():
    e = np.zeros((16, 16))
    e[7, 9] = 3.0
    for p in (0.1, 0.5, 0.9, 1.0):
        assert cumulative_energy_radius(e, (7, 9), p) == 0.0


def _disk_square_area(r: float, a: float) -> float:
    """Area of a radius-r disk intersected with the centred square [-a, a]^2."""
    if r <= a:
        return math.pi * r * r
    if r >= a * math.sqrt(2):
        return 4 * a * a
    seg = r * r * math.acos(a / r) - a * math.sqrt(r * r - a * a)
    return math.pi * r * r - 4 * seg


def test_uniform_square_r90_matches_numeric_integral():
    n = 128
    a = n / 2
    r90 = brentq(lambda r: _disk_square_area(r, a) - 0.9 * (2 * a) ** 2, 1e-6, a * math.sqrt(2))
    expected = r90 / math.hypot(n, n)
    got = cumulative_energy_radius(np.ones((n, n)), ((n - 1) / 2, (n - 1) / 2), 0.9)
    assert got == pytest.approx(expected, abs=1.0 / math.hypot(n, n))


def test_p_one_covers_all_nonzero_energy():
    e = np.zeros((20, 20))
    e[10, 10] = 1
    e[10, 16] = 0.5
    e[3, 10] = 1e-9
    assert cumulative_energy_radius(e, (10, 10), 1.0) == pytest.approx(7 / math.hypot(20, 20))


def test_radius_input_validation():
    with pytest.raises(ValueError):
        cumulative_energy_radius(np.zeros((4, 4)), (1, 1), 0.5)
    with pytest.raises(ValueError):
        cumulative_energy_radius(np.ones((4, 4)), (1, 1), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 24))
def test_energy_curve_monotone_and_ends_at_one(seed, n):
    rng = np.random.default_rng(seed)
    e = rng.random((n, n)) ** 4
    radii, frac = energy_curve(e, (rng.uniform(0, n - 1), rng.uniform(0, n - 1)))
    assert np.all(np.diff(frac) >= 0) and np.all(np.diff(radii) >= 0)
    assert frac[-1] == 1.0 and frac[0] >= 0


def test_bootstrap_constant_series_zero_width():
    assert bootstrap_ci([0.25] * 20) == (0.25, 0.25)
    lo, hi = bootstrap_ci(np.arange(50.0))
    assert lo < 24.5 < hi


def test_patch_radius_fraction():
    assert patch_radius_fraction(4, 32, 32) == pytest.approx((4 / math.sqrt(2)) / math.hypot(32, 32))
