from .config import ModelConfig, TrainConfig
from .model import (
    ChunkPrediction,
    ModelParams,
    backward,
    batch_loss,
    forward,
    forward_batch,
    gelu,
    loss_and_grad,
    nll_loss,
    predict,
    softmax,
)
from .optim import AdamState, adamw_step
from .train import LogRecord, TrainResult, mean_nll, train

__all__ = [
    "AdamState",
    "ChunkPrediction",
    "LogRecord",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "backward",
    "batch_loss",
    "forward",
    "forward_batch",
    "gelu",
    "loss_and_grad",
    "mean_nll",
    "nll_loss",
    "predict",
    "softmax",
    "train",
]
