"""Composite triples (x_A, x_B, M) for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .images import array_hash
from .masks import MaskFamily, MaskKind, augment_mask, feather_edges, generate_mask, soft_sigma_for

FAMILIES = tuple(MaskFamily)
KINDS = tuple(MaskKind)


@dataclass
class CompositeSet:
    """Image pairs with one mask per pair, expanded over mask kinds."""

    x_a: np.ndarray  # [N, 3, H, W]
    x_b: np.ndarray  # [N, 3, H, W]
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # kind -> [N, H, W]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.x_a)

    def digest(self) -> str:
        kinds = sorted(self.masks)
        return array_hash(self.x_a, self.x_b, *(self.masks[k] for k in kinds))


def sample_training_mask(rng: np.random.Generator, size: int, max_feather: float = 0.15) -> np.ndarray:
    """Random family, random kind, then optional graduated edge feathering."""
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    m = generate_mask(int(rng.integers(2**31)), (size, size), family)
    kind = KINDS[int(rng.integers(len(KINDS)))]
    sigma = soft_sigma_for(size) * rng.uniform(0.5, 4.0)
    m = augment_mask(m, kind, sigma=sigma if kind is MaskKind.SOFT else None)
    if kind in (MaskKind.BINARY, MaskKind.ORIGINAL) and rng.random() < 0.3:
        return feather_edges(m.data, rng.uniform(0.0, max_feather))
    if rng.random() < 0.05:
        # constant masks keep the all-keep / all-replace behaviour anchored
        return np.full((size, size), float(rng.integers(2)), np.float32)
    return m.data


def make_composite_set(
    images_a: np.ndarray,
    images_b: np.ndarray,
    seed: int,
    kinds=KINDS,
    soft_sigma: float | None = None,
) -> CompositeSet:
    """Evaluation set: one procedural mask per pair, re-expressed in every kind."""
    n, _, H, W = images_a.shape
    rng = np.random.default_rng(seed)
    originals = []
    for _ in range(n):
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
        m = generate_mask(int(rng.integers(2**31)), (H, W), family)
        # keep masks non-trivial so every kind has a boundary
        while m.data.mean() < 0.05 or m.data.mean() > 0.95 or not (m.data >= 0.5).any():
            m = generate_mask(int(rng.integers(2**31)), (H, W), family)
        originals.append(m)
    masks = {}
    for kind in kinds:
        kind = MaskKind(kind)
        sigma = soft_sigma if kind is MaskKind.SOFT else None
        masks[kind.value] = np.stack([augment_mask(m, kind, sigma).data for m in originals])
    return CompositeSet(images_a.copy(), images_b.copy(), masks, seed)
