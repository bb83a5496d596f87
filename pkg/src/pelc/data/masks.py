"""Procedural masks, mask-kind augmentation and latent downsampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

MIN_SIDE = 16
# soft-mask blur used at the 1024 px reference scale
REFERENCE_SOFT_SIGMA = 21.0
REFERENCE_RESOLUTION = 1024


class MaskKind(str, enum.Enum):
    SOFT = "soft"
    BINARY = "binary"
    ORIGINAL = "original"
    THIN = "thin"


class MaskFamily(str, enum.Enum):
    ELLIPSE = "ellipse"
    POLYGON = "polygon"
    BRUSH = "brush-stroke"
    MATTE = "matte-import"


@dataclass
class PixelMask:
    data: np.ndarray  # [H, W] float32 in [0, 1]
    kind: MaskKind = MaskKind.ORIGINAL

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        self.kind = MaskKind(self.kind)
        if self.data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def binarized(self) -> np.ndarray:
        return binarize(self.data)


def binarize(m: np.ndarray) -> np.ndarray:
    return (np.asarray(m) >= 0.5).astype(np.float32)


def soft_sigma_for(resolution: int, reference_sigma: float = REFERENCE_SOFT_SIGMA) -> float:
    """Soft-mask blur rescaled from the 1024 px reference to ``resolution``."""
    return reference_sigma * resolution / REFERENCE_RESOLUTION


def _check_shape(shape: Sequence[int]) -> tuple[int, int]:
    H, W = int(shape[0]), int(shape[1])
    if H < MIN_SIDE or W < MIN_SIDE:
        raise ValueError(f"mask shape {(H, W)} below minimum side {MIN_SIDE}")
    return H, W


def _supersampled_grid(H: int, W: int, ss: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(H * ss) + 0.5) / ss
    xs = (np.arange(W * ss) + 0.5) / ss
    return np.meshgrid(ys, xs, indexing="ij")


def _box_reduce(a: np.ndarray, ss: int) -> np.ndarray:
    H, W = a.shape[0] // ss, a.shape[1] // ss
    return a.reshape(H, ss, W, ss).mean(axis=(1, 3))


def ellipse_mask(center, axes, angle: float, shape, ss: int = 4) -> np.ndarray:
    """Anti-aliased filled ellipse (pixel coverage by ``ss``x``ss`` supersampling)."""
    H, W = shape
    yy, xx = _supersampled_grid(H, W, ss)
    cy, cx = center
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    inside = (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0
    return _box_reduce(inside.astype(np.float32), ss)


def polygon_mask(vertices: np.ndarray, shape, ss: int = 4) -> np.ndarray:
    """Anti-aliased polygon fill; vertices are (y, x) in pixel units.

    Polygons with (numerically) zero area rasterize to an all-zero mask.
    """
    from matplotlib.path import Path as MplPath

    H, W = shape
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return np.zeros((H, W), np.float32)
    area = 0.5 * abs(np.dot(v[:, 0], np.roll(v[:, 1], 1)) - np.dot(v[:, 1], np.roll(v[:, 0], 1)))
    if area < 1e-9:
        return np.zeros((H, W), np.float32)
    yy, xx = _supersampled_grid(H, W, ss)
    path = MplPath(v[:, ::-1])
    inside = path.contains_points(np.stack([xx.ravel(), yy.ravel()], axis=1))
    return _box_reduce(inside.reshape(yy.shape).astype(np.float32), ss)


def brush_mask(points: np.ndarray, radius: float, shape, ss: int = 4) -> np.ndarray:
    """Union of discs of ``radius`` swept along the polyline ``points`` (y, x)."""
    H, W = shape
    yy, xx = _supersampled_grid(H, W, ss)
    inside = np.zeros(yy.shape, dtype=bool)
    pts = np.asarray(points, dtype=np.float64)
    for p, q in zip(pts[:-1], pts[1:]):
        d = q - p
        L2 = float(d @ d)
        if L2 == 0.0:
            t = np.zeros_like(yy)
        else:
            t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / L2, 0.0, 1.0)
        dist2 = (yy - p[0] - t * d[0]) ** 2 + (xx - p[1] - t * d[1]) ** 2
        inside |= dist2 <= radius**2
    return _box_reduce(inside.astype(np.float32), ss)


def synthetic_matte(rng: np.random.Generator, shape) -> np.ndarray:
    """Matte-like soft blob: smoothed noise pushed through a random-width soft ramp."""
    H, W = shape
    noise = rng.standard_normal((H, W))
    field = ndimage.gaussian_filter(noise, sigma=min(H, W) / 6.0, mode="wrap")
    field = (field - field.mean()) / (field.std() + 1e-12)
    bias = rng.uniform(-0.6, 0.6)
    sharpness = rng.uniform(2.0, 12.0)
    return (1.0 / (1.0 + np.exp(-sharpness * (field - bias)))).astype(np.float32)


def load_matte(path: str | Path, shape) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("L").resize((shape[1], shape[0]), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def generate_mask(
    rng_seed: int,
    shape: Sequence[int] = (32, 32),
    family: MaskFamily | str = MaskFamily.ELLIPSE,
    matte_paths: Sequence[str | Path] | None = None,
) -> PixelMask:
    """Deterministic procedural mask for ``rng_seed``.

    ``matte-import`` draws from ``matte_paths`` when given, otherwise it falls
    back to a synthetic soft matte.
    """
    H, W = _check_shape(shape)
    family = MaskFamily(family)
    rng = np.random.default_rng(rng_seed)
    s = min(H, W)
    if family is MaskFamily.ELLIPSE:
        center = (rng.uniform(0.25, 0.75) * H, rng.uniform(0.25, 0.75) * W)
        axes = (rng.uniform(0.15, 0.4) * s, rng.uniform(0.15, 0.4) * s)
        m = ellipse_mask(center, axes, rng.uniform(0, np.pi), (H, W))
    elif family is MaskFamily.POLYGON:
        n = int(rng.integers(3, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.15, 0.45, n) * s
        cy, cx = rng.uniform(0.3, 0.7) * H, rng.uniform(0.3, 0.7) * W
        verts = np.stack([cy + radii * np.sin(angles), cx + radii * np.cos(angles)], axis=1)
        m = polygon_mask(verts, (H, W))
    elif family is MaskFamily.BRUSH:
        n = int(rng.integers(3, 7))
        start = np.array([rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W])
        steps = rng.normal(0.0, 0.25 * s, (n - 1, 2))
        pts = np.clip(np.vstack([start, start + np.cumsum(steps, axis=0)]), 0, [H - 1, W - 1])
        m = brush_mask(pts, rng.uniform(0.05, 0.12) * s, (H, W))
    else:
        if matte_paths:
            path = matte_paths[int(rng.integers(len(matte_paths)))]
            m = load_matte(path, (H, W))
        else:
            m = synthetic_matte(rng, (H, W))
    return PixelMask(np.clip(m, 0.0, 1.0), MaskKind.ORIGINAL)


def _edge_padded(op, m: np.ndarray) -> np.ndarray:
    padded = np.pad(m, 1, mode="edge")
    return op(padded, structure=np.ones((3, 3), bool))[1:-1, 1:-1]


def edge_set(m: np.ndarray) -> np.ndarray:
    """1-px boundary band: XOR of 3x3 dilation and erosion of the binarized mask.

    The frame border is not a boundary (edge-replicated padding).
    """
    b = np.asarray(m) >= 0.5
    dil = _edge_padded(ndimage.binary_dilation, b)
    ero = _edge_padded(ndimage.binary_erosion, b)
    return dil ^ ero


def feather_edges(m: np.ndarray, fraction: float) -> np.ndarray:
    """Linear feathering ramp across the boundary, ``fraction`` of the short side wide.

    Stand-in for graduated edge augmentation; ``fraction`` is typically drawn in [0, 0.15].
    """
    if fraction <= 0:
        return np.asarray(m, np.float32)
    width = fraction * min(m.shape)
    b = np.asarray(m) >= 0.5
    if b.all() or not b.any():
        return np.asarray(m, np.float32)
    d_out = ndimage.distance_transform_edt(~b) - 0.5
    d_in = ndimage.distance_transform_edt(b) - 0.5
    sd = np.where(b, -d_in, d_out)
    return np.clip(0.5 - sd / width, 0.0, 1.0).astype(np.float32)


def augment_mask(m: PixelMask, kind: MaskKind | str, sigma: float | None = None) -> PixelMask:
    """Re-express ``m`` as one of the evaluation mask kinds."""
    kind = MaskKind(kind)
    if kind is MaskKind.ORIGINAL:
        return PixelMask(m.data.copy(), kind)
    if kind is MaskKind.BINARY:
        return PixelMask(binarize(m.data), kind)
    if kind is MaskKind.THIN:
        return PixelMask(edge_set(m.data).astype(np.float32), kind)
    if sigma is None:
        sigma = soft_sigma_for(max(m.shape))
    if sigma <= 0:
        raise ValueError(f"soft mask needs sigma > 0, got {sigma}")
    soft = ndimage.gaussian_filter(binarize(m.data), sigma=sigma, mode="nearest")
    return PixelMask(np.clip(soft, 0.0, 1.0), kind)


def downsample_mask(M: PixelMask | np.ndarray, f: int, method: str = "area") -> np.ndarray:
    """Pixel mask -> latent-grid mask [H/f, W/f] by area, bilinear or nearest sampling.

    Bilinear and nearest follow the usual half-pixel-centre resampling
    convention (``align_corners=False``) without anti-aliasing.
    """
    data = M.data if isinstance(M, PixelMask) else np.asarray(M, np.float32)
    H, W = data.shape
    if H % f or W % f:
        raise ValueError(f"mask shape {(H, W)} not divisible by stride {f}")
    h, w = H // f, W // f
    if method == "area":
        out = data.reshape(h, f, w, f).mean(axis=(1, 3))
    elif method == "nearest":
        out = data[::f, ::f]
    elif method == "bilinear":
        out = _bilinear_down(data, f)
    else:
        raise ValueError(f"unknown downsample method {method!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _bilinear_down(data: np.ndarray, f: int) -> np.ndarray:
    H, W = data.shape

    def weights(n_in: int) -> np.ndarray:
        n_out = n_in // f
        src = (np.arange(n_out) + 0.5) * f - 0.5
        lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = src - np.floor(src)
        A = np.zeros((n_out, n_in))
        np.add.at(A, (np.arange(n_out), lo), 1 - frac)
        np.add.at(A, (np.arange(n_out), hi), frac)
        return A

    return weights(H) @ data @ weights(W).T


def upsample_nearest(m: np.ndarray, f: int) -> np.ndarray:
    return np.repeat(np.repeat(m, f, axis=0), f, axis=1)


def masked_area(m: PixelMask | np.ndarray) -> float:
    data = m.data if isinstance(m, PixelMask) else m
    return float(np.mean(data))
