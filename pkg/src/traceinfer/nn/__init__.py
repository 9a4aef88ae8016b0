"""Convolutional-recurrent state classifier written directly in numpy."""

from .checkpoint import CHECKPOINT_VERSION, CheckpointError, ModelCheckpoint
from .gradcheck import gradient_check, kink_margin, numeric_gradient, relative_error
from .layers import (
    ShapeError,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    gru_backward,
    gru_forward,
    leaky_relu,
    sigmoid,
    softmax,
)
from .loss import dice_loss, one_hot
from .model import VARIANTS, ConfigError, Model, ModelConfig, architecture, build_model
from .optim import Adam, adam_step
from .train import (
    DEFAULT_FINE_TUNE_LAYERS,
    SelectorError,
    fine_tune,
    pad_batch,
    predict_dataset,
    predict_probabilities,
    predict_states,
    probabilities_to_states,
    train,
)

__all__ = [
    "Adam", "CHECKPOINT_VERSION", "CheckpointError", "ConfigError", "DEFAULT_FINE_TUNE_LAYERS",
    "Model", "ModelCheckpoint", "ModelConfig", "SelectorError", "ShapeError", "VARIANTS",
    "adam_step", "architecture", "build_model", "conv1d_backward", "conv1d_forward",
    "dense_backward", "dense_forward", "dice_loss", "fine_tune", "gradient_check",
    "gru_backward", "gru_forward", "kink_margin", "leaky_relu", "numeric_gradient", "one_hot",
    "pad_batch", "predict_dataset", "predict_probabilities", "predict_states",
    "probabilities_to_states", "relative_error", "sigmoid", "softmax", "train",
]
