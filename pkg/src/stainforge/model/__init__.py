from .vit import ViTConfig, ViTEncoder, SelfAttention
from .translator import Translator, DetailCapture, init_weights, predict_tile, he_to_input
from .lora import LoRAConfig, LoRAError, LoRALinear, apply_lora, lora_parameter_count
from .losses import (
    LossConfig,
    weighted_mse,
    weighted_mse_parts,
    scale_targets,
    unscale_predictions,
    compute_sigma,
)
from .augment import augment_pair
from .training import (
    TrainConfig,
    TrainResult,
    TrainingError,
    check_gradients,
    load_state_from_numpy,
    lr_at,
    state_to_numpy,
    train,
)
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "ViTConfig", "ViTEncoder", "SelfAttention", "Translator", "DetailCapture",
    "init_weights", "predict_tile", "he_to_input",
    "LoRAConfig", "LoRAError", "LoRALinear", "apply_lora", "lora_parameter_count",
    "LossConfig", "weighted_mse", "weighted_mse_parts", "scale_targets",
    "unscale_predictions", "compute_sigma", "augment_pair",
    "TrainConfig", "TrainResult", "TrainingError", "check_gradients",
    "load_state_from_numpy", "lr_at", "state_to_numpy", "train",
    "save_checkpoint", "load_checkpoint",
]
