"""Multi-branch attentive Transformer on a small numpy autodiff core."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import Model, ModelConfig, build_model, forward, param_count, proximal_init
from .tensor import RngStream, Tape, Tensor, grad_check
from .training import TrainConfig, evaluate, lr_at, train_loop

__all__ = [
    "Checkpoint", "Model", "ModelConfig", "RngStream", "Tape", "Tensor", "TrainConfig",
    "build_model", "evaluate", "forward", "grad_check", "load_checkpoint", "lr_at",
    "param_count", "proximal_init", "save_checkpoint", "train_loop",
]
