from .composites import CompositeSet, make_composite_set, sample_training_mask
from .fields import HaloWeights, SDFField, compute_halo, compute_sdf, sdf_bins
from .images import array_hash, make_image_set
from .masks import (
    MaskFamily,
    MaskKind,
    PixelMask,
    augment_mask,
    binarize,
    downsample_mask,
    edge_set,
    generate_mask,
    soft_sigma_for,
)

__all__ = [
    "CompositeSet",
    "HaloWeights",
    "MaskFamily",
    "MaskKind",
    "PixelMask",
    "SDFField",
    "array_hash",
    "augment_mask",
    "binarize",
    "compute_halo",
    "compute_sdf",
    "downsample_mask",
    "edge_set",
    "generate_mask",
    "make_composite_set",
    "make_image_set",
    "sample_training_mask",
    "sdf_bins",
    "soft_sigma_for",
]
