from .model import FlowConfig, FlowNet, add_lora, merge_lora
from .sampling import FlowState, dual_sigma_corrupt, flow_step, inpaint, retargeted_step, uniform_schedule
from .train import FinetuneConfig, FlowTrainConfig, finetune_dual_sigma, load_flow, save_flow, train_flow

__all__ = [
    "FinetuneConfig",
    "FlowConfig",
    "FlowNet",
    "FlowState",
    "FlowTrainConfig",
    "add_lora",
    "dual_sigma_corrupt",
    "finetune_dual_sigma",
    "flow_step",
    "inpaint",
    "load_flow",
    "merge_lora",
    "retargeted_step",
    "save_flow",
    "train_flow",
    "uniform_schedule",
]
