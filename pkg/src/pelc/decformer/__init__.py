from .model import BlendField, DecFormer, DecformerConfig
from .train import DecformerTrainConfig, load_decformer, save_decformer, train_decformer

__all__ = ["BlendField", "DecFormer", "DecformerConfig", "DecformerTrainConfig", "load_decformer", "save_decformer", "train_decformer"]
