import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from pelc.autoencoder.model import identity_autoencoder
from pelc.compositor import (
    PSNR_SENTINEL,
    compose_pixels,
    evaluate_equivalence,
    halo_l1,
    heuristic_blend,
    out_of_range_fraction,
    perceptual_surrogate,
    prepare,
    project_alpha_shift,
    psnr,
    sdf_error_profile,
    ssim,
    unclamped_alpha,
)
from pelc.compositor.blend import downsample_mask_t
from pelc.compositor.metrics import generate_perceptual_weights, _shipped_weights
from pelc.data import downsample_mask, generate_mask, make_composite_set, make_image_set

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False, width=64)


def test_compose_pixels_examples():
    a, b = torch.full((1, 3, 4, 4), 0.2), torch.full((1, 3, 4, 4), 0.8)
    assert torch.equal(compose_pixels(a, b, torch.zeros(1, 4, 4)), a)
    assert torch.equal(compose_pixels(a, b, torch.ones(1, 4, 4)), b)
    torch.testing.assert_close(compose_pixels(a, b, torch.full((1, 4, 4), 0.5)), torch.full((1, 3, 4, 4), 0.5))
    with pytest.raises(ValueError):
        compose_pixels(a, b, torch.zeros(1, 5, 5))


def test_heuristic_all_ones_gives_b():
    za, zb = torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8)
    for method in ("area", "bilinear", "nearest"):
        assert torch.equal(heuristic_blend(za, zb, torch.ones(2, 32, 32), 4, method), zb)


def test_heuristic_rejects_size_mismatch():
    with pytest.raises(ValueError):
        heuristic_blend(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 8), torch.ones(1, 30, 30), 4)


@pytest.mark.parametrize("method", ["area", "bilinear", "nearest"])
def test_torch_downsample_matches_numpy(method):
    m = generate_mask(3, (32, 32), "polygon").data
    t = downsample_mask_t(torch.from_numpy(m)[None, None], 4, method)[0, 0].numpy()
    np.testing.assert_allclose(t, downsample_mask(m, 4, method), atol=1e-6)


def test_identity_mode_heuristic_is_exact_for_100_triples():
    ae = identity_autoencoder(1)
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        xa, xb = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        m = torch.from_numpy(generate_mask(int(rng.integers(2**31)), (32, 32), ["ellipse", "polygon", "brush-stroke", "matte-import"][i % 4]).data)[None]
        out = ae.decode(heuristic_blend(ae.encode(xa), ae.encode(xb), m, 1))
        worst = max(worst, float((out - compose_pixels(xa, xb, m)).abs().max()))
    assert worst < 1e-6


@pytest.mark.parametrize(
    "za,zb,zt,alpha,shift",
    [(1.0, 3.0, 2.0, 0.5, 0.0), (1.0, 3.0, 5.0, 1.0, 2.0), (1.0, 1.0, 2.0, 0.0, 1.0)],
)
def test_projection_examples(za, zb, zt, alpha, shift):
    f = project_alpha_shift(*(torch.tensor([v], dtype=torch.float64) for v in (za, zb, zt)))
    assert float(f.alpha) == pytest.approx(alpha)
    assert float(f.shift) == pytest.approx(shift)


def test_unclamped_alpha_example():
    assert float(unclamped_alpha(torch.tensor([1.0]), torch.tensor([3.0]), torch.tensor([5.0]))) == pytest.approx(2.0)


@settings(max_examples=300)
@given(finite, finite, finite)
def test_projection_optimality_and_identity(za, zb, zt):
    t = lambda v: torch.tensor([v], dtype=torch.float64)  # noqa: E731
    f = project_alpha_shift(t(za), t(zb), t(zt))
    a, s = float(f.alpha), float(f.shift)
    assert 0.0 <= a <= 1.0
    assert (1 - a) * za + a * zb + s == pytest.approx(zt, abs=1e-9 * (1 + abs(za) + abs(zb) + abs(zt)))
    for g in np.linspace(0, 1, 101):
        assert abs(s) <= abs(zt - ((1 - g) * za + g * zb)) + 1e-9
    if abs(s) > 1e-9 and abs(zb - za) > 1e-6:
        assert min(a, 1 - a) < 1e-9


def test_out_of_range_examples():
    za, zb = torch.randn(2, 4, 8, 8, dtype=torch.float64), torch.randn(2, 4, 8, 8, dtype=torch.float64)
    assert float(out_of_range_fraction(za, zb, za)) == 0.0
    assert float(out_of_range_fraction(za, zb, 2 * zb - za)) == 1.0
    zb2 = za.clone()
    zb2[0, 0, 0, 0] += 1.0
    r = out_of_range_fraction(za, zb2, za + 0.1)
    assert r.n_valid == 1 and r.n_degenerate == za.numel() - 1
    with pytest.raises(ValueError):
        out_of_range_fraction(za, za, zb)


# ---- metrics ----------------------------------------------------------------------------


def test_metrics_self_comparison():
    x = torch.rand(2, 3, 32, 32)
    assert float((ssim(x, x) - 1).abs().max()) < 1e-6
    assert (psnr(x, x) == PSNR_SENTINEL).all()
    assert (perceptual_surrogate(x, x) == 0).all()


def test_psnr_constant_offset():
    x = torch.rand(1, 3, 16, 16) * 0.8
    assert float(psnr(x, x + 0.1)) == pytest.approx(20.0, abs=1e-4)


@pytest.mark.parametrize("seed", [0, 1])
def test_ssim_matches_skimage(seed):
    x = make_image_set(1, "heldout", seed)[0]
    y = np.clip(x + np.random.default_rng(seed).normal(0, 0.05, x.shape), 0, 1).astype(np.float32)
    ref = structural_similarity(x, y, channel_axis=0, data_range=1.0, win_size=7)
    ours = float(ssim(torch.from_numpy(x)[None], torch.from_numpy(y)[None]))
    assert ours == pytest.approx(ref, abs=1e-4)


def test_halo_l1_examples():
    x = torch.rand(1, 3, 16, 16)
    w = torch.rand(16, 16)
    assert float(halo_l1(x, x, w)) == 0.0
    assert float(halo_l1(x + 0.25, x, w)) == pytest.approx(0.25, abs=1e-6)
    band = torch.zeros(16, 16)
    band[4:8] = 1
    y = torch.rand(1, 3, 16, 16)
    expected = (x - y).abs()[:, :, 4:8].mean()
    assert float(halo_l1(x, y, band)) == pytest.approx(float(expected), rel=1e-6)


def test_perceptual_weights_regenerate_from_seed():
    fresh, shipped = generate_perceptual_weights(), _shipped_weights()
    assert set(fresh) == set(shipped)
    for k in fresh:
        np.testing.assert_array_equal(fresh[k], shipped[k])


def test_perceptual_is_symmetric_and_positive():
    x, y = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    d = perceptual_surrogate(x, y)
    assert (d > 0).all()
    torch.testing.assert_close(d, perceptual_surrogate(y, x))


# ---- evaluation harness -------------------------------------------------------------------


@pytest.fixture(scope="module")
def identity_set():
    x = make_image_set(6, "heldout", 0)
    return make_composite_set(x[:3], x[3:], seed=2)


def test_ground_truth_row_is_perfect(identity_set):
    ae = identity_autoencoder(4)
    rep = evaluate_equivalence(ae, "ground_truth", identity_set)
    assert rep.psnr_db == PSNR_SENTINEL and rep.ssim == pytest.approx(1.0) and rep.halo_l1 == 0.0
    assert set(rep.per_kind) == {"soft", "binary", "original", "thin"}


def test_identity_mode_heuristic_row_is_perfect(identity_set):
    ae = identity_autoencoder(1)
    rep = evaluate_equivalence(ae, "heuristic_area", identity_set)
    assert rep.psnr_db > 60 and rep.mse < 1e-10 and rep.halo_l1 < 1e-6


def test_oracle_beats_heuristic_with_stride(identity_set):
    ae = identity_autoencoder(4)
    prep = prepare(ae, identity_set)
    heur = evaluate_equivalence(ae, "heuristic_area", prep)
    orc = evaluate_equivalence(ae, "oracle", prep)
    assert orc.mse < 1e-10 < heur.mse


def test_ground_truth_sdf_profile_flat_zero(identity_set):
    prof = sdf_error_profile(identity_autoencoder(4), "ground_truth", identity_set)
    for p in prof.values():
        assert (p.mean == 0).all()
    assert prof["pixel"].count.sum() == 3 * 32 * 32


def test_unknown_method_rejected(identity_set):
    with pytest.raises(ValueError):
        evaluate_equivalence(identity_autoencoder(1), "nope", identity_set)
