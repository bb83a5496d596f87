import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from pelc.data import (
    MaskFamily,
    MaskKind,
    PixelMask,
    array_hash,
    augment_mask,
    compute_halo,
    compute_sdf,
    downsample_mask,
    edge_set,
    generate_mask,
    make_composite_set,
    make_image_set,
)
from pelc.data.fields import latent_radius
from pelc.data.io import load_mask_png, save_mask_png
from pelc.data.masks import polygon_mask, upsample_nearest

GOLDEN = Path(__file__).parent / "golden"

FAMILIES = list(MaskFamily)


def test_generation_is_bitwise_deterministic():
    a = generate_mask(0, (64, 64), "ellipse").data
    b = generate_mask(0, (64, 64), "ellipse").data
    assert a.tobytes() == b.tobytes()
    assert 0 < a.mean() < 1


def test_degenerate_polygon_is_empty():
    verts = np.array([[5.0, 5.0], [5.0, 20.0], [5.0, 30.0]])
    assert polygon_mask(verts, (32, 32)).sum() == 0


def test_brush_seed7_matches_golden():
    golden = json.loads((GOLDEN / "brush_seed7_64.json").read_text())
    m = generate_mask(7, (64, 64), "brush-stroke").data
    assert 0 < m.mean() < 1
    assert m.mean() == pytest.approx(golden["coverage"], abs=1e-7)
    assert array_hash(m) == golden["sha256"]


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_in_unit_range(family):
    m = generate_mask(3, (32, 32), family).data
    assert m.dtype == np.float32 and m.min() >= 0 and m.max() <= 1


def test_rejects_tiny_or_odd_shapes():
    with pytest.raises(ValueError):
        generate_mask(0, (8, 8), "ellipse")


def test_binary_of_constant_is_constant():
    ones = PixelMask(np.ones((16, 16)))
    assert (augment_mask(ones, "binary").data == 1).all()


def test_thin_on_half_plane_matches_bruteforce_xor():
    m = np.zeros((8, 8), np.float32)
    m[:, 4:] = 1
    thin = augment_mask(PixelMask(m), "thin").data
    # brute force: a pixel is on the edge iff its 3x3 neighbourhood (edge-clamped) mixes labels
    ref = np.zeros_like(m)
    for i in range(8):
        for j in range(8):
            nb = m[max(i - 1, 0) : i + 2, max(j - 1, 0) : j + 2]
            ref[i, j] = float(nb.min() != nb.max())
    np.testing.assert_array_equal(thin, ref)
    assert set(np.flatnonzero(ref.any(0))) == {3, 4}


def test_soft_disk_strictly_fractional_near_boundary():
    yy, xx = np.mgrid[0:32, 0:32]
    disk = (np.hypot(yy - 15.5, xx - 15.5) < 9).astype(np.float32)
    soft = augment_mask(PixelMask(disk), "soft", sigma=2.0).data
    sdf = compute_sdf(disk).data
    band = np.abs(sdf) <= 4
    assert ((soft[band] > 0) & (soft[band] < 1)).all()


def test_soft_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        augment_mask(PixelMask(np.ones((16, 16))), "soft", sigma=0.0)


@pytest.mark.parametrize("method", ["area", "bilinear", "nearest"])
def test_downsample_constant(method):
    np.testing.assert_array_equal(downsample_mask(np.ones((16, 16)), 4, method), np.ones((4, 4)))


def test_downsample_checkerboard_blocks():
    m = np.kron(np.array([[1, 0], [0, 1]], np.float32), np.ones((4, 4), np.float32))
    np.testing.assert_array_equal(downsample_mask(m, 4, "area"), [[1, 0], [0, 1]])


def test_downsample_vertical_line_area_integral():
    m = np.zeros((16, 16), np.float32)
    m[:, 3] = 1
    out = downsample_mask(m, 8, "area")
    np.testing.assert_allclose(out[:, 0], 1 / 8)
    np.testing.assert_allclose(out[:, 1], 0)


def test_downsample_requires_divisible_shape():
    with pytest.raises(ValueError):
        downsample_mask(np.ones((18, 18)), 4)


@given(st.floats(0, 1), st.sampled_from([1, 2, 4, 8]))
def test_down_up_of_constant_is_identity(v, f):
    m = np.full((16, 16), v, np.float32)
    np.testing.assert_array_equal(upsample_nearest(downsample_mask(m, f, "nearest"), f), m)


def test_sdf_half_plane_geometry():
    m = np.zeros((16, 16), np.float32)
    m[:, :8] = 1
    sdf = compute_sdf(m).data
    for k in range(1, 6):
        assert abs(sdf[5, 7 + k] - k) <= 1
    assert abs(sdf[5, 8]) <= 1 and abs(sdf[5, 7]) <= 1


def _bruteforce_sdf(m: np.ndarray) -> np.ndarray:
    inside = m >= 0.5
    pts_in = np.argwhere(inside)
    pts_out = np.argwhere(~inside)
    out = np.zeros(m.shape)
    for (i, j) in np.argwhere(np.ones_like(m, bool)):
        other = pts_out if inside[i, j] else pts_in
        d = np.sqrt(((other - [i, j]) ** 2).sum(1)).min()
        out[i, j] = -d if inside[i, j] else d
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sdf_matches_bruteforce_scan(seed):
    m = generate_mask(seed, (32, 32), FAMILIES[seed % 3]).data
    np.testing.assert_allclose(compute_sdf(m).data, _bruteforce_sdf(m), atol=1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(FAMILIES[:3]))
def test_sdf_sign_matches_mask_away_from_boundary(seed, family):
    m = generate_mask(seed, (32, 32), family).data
    sdf = compute_sdf(m).data
    far = np.abs(sdf) > 1
    np.testing.assert_array_equal((sdf < 0)[far], (m >= 0.5)[far])


def test_latent_radius_bracket():
    assert latent_radius(8, 1024, 1024, 128, 128) == 1
    assert latent_radius(4, 32, 32, 8, 8) == 1


def test_halo_edge_weight_and_support():
    yy, xx = np.mgrid[0:48, 0:48]
    disk = (np.hypot(yy - 23.5, xx - 23.5) < 12).astype(np.float32)
    halo = compute_halo(disk, 8, 8)
    edges = edge_set(disk)
    np.testing.assert_allclose(halo.pixel[edges], 1.0)
    dist = ndimage.distance_transform_edt(~edges)
    assert (halo.pixel[dist >= 8] == 0).all()
    assert halo.radius_latent == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(FAMILIES))
def test_halo_symmetric_under_complement(seed, family):
    m = binary = (generate_mask(seed, (32, 32), family).data >= 0.5).astype(np.float32)
    np.testing.assert_array_equal(edge_set(m), edge_set(1 - binary))
    np.testing.assert_array_equal(compute_halo(m, 4, 4).pixel, compute_halo(1 - m, 4, 4).pixel)


def test_halo_rejects_zero_radius():
    with pytest.raises(ValueError):
        compute_halo(np.ones((16, 16)), 0, 4)


def test_mask_png_roundtrip(tmp_path):
    m = generate_mask(1, (32, 32), "ellipse")
    save_mask_png(tmp_path / "m.png", m)
    back = load_mask_png(tmp_path / "m.png")
    np.testing.assert_allclose(back.data, m.data, atol=1 / 65535)
    b = augment_mask(m, "binary")
    save_mask_png(tmp_path / "b.png", b)
    np.testing.assert_array_equal(load_mask_png(tmp_path / "b.png", "binary").data, b.data)


def test_image_sets_deterministic_and_split():
    a = make_image_set(4, "train", 0)
    assert a.shape == (4, 3, 32, 32) and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, make_image_set(4, "train", 0))
    assert array_hash(a) != array_hash(make_image_set(4, "heldout", 0))


def test_composite_set_covers_every_kind():
    x = make_image_set(3, "heldout", 0)
    cset = make_composite_set(x, x[::-1].copy(), seed=5)
    assert set(cset.masks) == {k.value for k in MaskKind}
    assert cset.digest() == make_composite_set(x, x[::-1].copy(), seed=5).digest()
    for masks in cset.masks.values():
        assert masks.shape == (3, 32, 32)
