"""Small natural-image crops drawn from the scikit-image sample photographs."""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np
from skimage.transform import resize

# Source photographs are split so held-out crops never share a source with training.
TRAIN_SOURCES = (
    "astronaut", "coffee", "hubble_deep_field", "immunohistochemistry", "retina",
    "motorcycle_left", "colorwheel", "brick", "grass", "gravel", "camera",
)
HELDOUT_SOURCES = ("chelsea", "rocket", "motorcycle_right", "coins")


@lru_cache(maxsize=None)
def _source(name: str) -> np.ndarray:
    import skimage.data

    if name == "motorcycle_left":
        img = skimage.data.stereo_motorcycle()[0]
    elif name == "motorcycle_right":
        img = skimage.data.stereo_motorcycle()[1]
    else:
        img = getattr(skimage.data, name)()
    img = np.asarray(img, dtype=np.float32) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.ascontiguousarray(img[..., :3].transpose(2, 0, 1))  # [3, H, W]


def random_crop(rng: np.random.Generator, sources: tuple[str, ...], size: int) -> np.ndarray:
    """One augmented crop: random source, downscale, crop, flip and colour tint."""
    src = _source(sources[int(rng.integers(len(sources)))])
    _, H, W = src.shape
    scale = rng.uniform(0.125, 0.5)
    side = int(np.ceil(size / scale))
    side = min(side, H, W)
    y0 = int(rng.integers(0, H - side + 1))
    x0 = int(rng.integers(0, W - side + 1))
    patch = src[:, y0 : y0 + side, x0 : x0 + side]
    # anti-aliased downscale; plain point sampling turns fine texture into noise
    patch = resize(patch, (3, size, size), order=1, anti_aliasing=True, mode="edge")
    if rng.random() < 0.5:
        patch = patch[:, :, ::-1]
    tint = rng.uniform(0.8, 1.2, size=(3, 1, 1))
    gain = rng.uniform(0.85, 1.1)
    return np.clip(patch * tint * gain, 0.0, 1.0).astype(np.float32)


def make_image_set(n: int, split: str = "train", seed: int = 0, size: int = 32) -> np.ndarray:
    """Deterministic stack of ``n`` RGB crops [n, 3, size, size] in [0, 1]."""
    if split not in ("train", "heldout"):
        raise ValueError(f"unknown split {split!r}")
    sources = TRAIN_SOURCES if split == "train" else HELDOUT_SOURCES
    # the split name enters the seed so train/held-out streams never coincide
    stream = np.random.SeedSequence([seed, 0 if split == "train" else 1, size])
    rng = np.random.default_rng(stream)
    return np.stack([random_crop(rng, sources, size) for _ in range(n)])


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
