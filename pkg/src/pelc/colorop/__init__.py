from .model import ColorOpConfig, ColorOperator, ColorTrainConfig, load_color_operator, save_color_operator, train_color_operator
from .ops import ColorParams, apply_color_latents_naive, apply_color_pixels

__all__ = [
    "ColorOpConfig",
    "ColorOperator",
    "ColorParams",
    "ColorTrainConfig",
    "apply_color_latents_naive",
    "apply_color_pixels",
    "load_color_operator",
    "save_color_operator",
    "train_color_operator",
]
