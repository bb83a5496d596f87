from .blend import (
    BlendField,
    OutOfRange,
    compose_pixels,
    downsample_mask_t,
    heuristic_blend,
    out_of_range_fraction,
    project_alpha_shift,
    unclamped_alpha,
)
from .evaluate import EquivalenceReport, PreparedSet, SDFProfile, evaluate_equivalence, prepare, sdf_error_profile
from .metrics import PSNR_SENTINEL, PerceptualSurrogate, halo_l1, mse, perceptual_surrogate, psnr, ssim

__all__ = [
    "BlendField",
    "EquivalenceReport",
    "OutOfRange",
    "PSNR_SENTINEL",
    "PerceptualSurrogate",
    "PreparedSet",
    "SDFProfile",
    "compose_pixels",
    "downsample_mask_t",
    "evaluate_equivalence",
    "halo_l1",
    "heuristic_blend",
    "mse",
    "out_of_range_fraction",
    "perceptual_surrogate",
    "prepare",
    "project_alpha_shift",
    "psnr",
    "sdf_error_profile",
    "ssim",
    "unclamped_alpha",
]
