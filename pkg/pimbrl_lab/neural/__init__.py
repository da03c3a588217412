"""Differentiable core: gradient tape, layers, parameters and the Adam optimizer."""

from pimbrl_lab.neural.layers import (
    ConvEncoderSpec,
    MlpSpec,
    conv1d_circular,
    conv_encode,
    dense_forward,
    lstm_cell_step,
)
from pimbrl_lab.neural.optim import adam_update
from pimbrl_lab.neural.params import ParameterSet, load_checkpoint, save_checkpoint
from pimbrl_lab.neural.tape import Tape, Tensor, backward

__all__ = [
    "ConvEncoderSpec",
    "MlpSpec",
    "ParameterSet",
    "Tape",
    "Tensor",
    "adam_update",
    "backward",
    "conv1d_circular",
    "conv_encode",
    "dense_forward",
    "load_checkpoint",
    "lstm_cell_step",
    "save_checkpoint",
]
