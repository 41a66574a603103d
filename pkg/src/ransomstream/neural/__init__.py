"""From-scratch numerical core of the classifier."""

from .layers import (
    AttentionParams,
    ConvParams,
    LstmParams,
    attention_forward,
    conv1d_forward,
    lstm_step,
    softmax_cross_entropy,
)
from .model import GROUPS, VARIANTS, Model, ModelArch, model_forward, predict, predict_labels, set_frozen
from .optim import OptimizerState, adam_step, fit, train_minibatch

__all__ = [
    "AttentionParams",
    "ConvParams",
    "GROUPS",
    "LstmParams",
    "Model",
    "ModelArch",
    "OptimizerState",
    "VARIANTS",
    "adam_step",
    "attention_forward",
    "conv1d_forward",
    "fit",
    "lstm_step",
    "model_forward",
    "predict",
    "predict_labels",
    "set_frozen",
    "softmax_cross_entropy",
    "train_minibatch",
]
