from .layers import mae_loss
from .model import (
    ModelConfig,
    NumericalError,
    ShapeError,
    backward,
    forward,
    init_weights,
    param_shapes,
    zero_weights,
)
from .train import (
    DivergenceError,
    HyperParams,
    Prediction,
    TrainReport,
    Weights,
    load_weights,
    predict_batch,
    save_weights,
    train,
)

__all__ = [
    "DivergenceError",
    "HyperParams",
    "ModelConfig",
    "NumericalError",
    "Prediction",
    "ShapeError",
    "TrainReport",
    "Weights",
    "backward",
    "forward",
    "init_weights",
    "load_weights",
    "mae_loss",
    "param_shapes",
    "predict_batch",
    "save_weights",
    "train",
    "zero_weights",
]
