"""Layer wrappers that cache (X, Z) and produce per-example gradients."""

from .attention import MultiHeadAttention, TransformerClassifier, positional_encoding
from .base import (Layer, LayerCache, Model, Sequential, flatten_params, load_params,
                   save_params)
from .conv import Conv2d, Conv3d
from .dense import Activation, Flatten, LayerNorm, Linear, MaxPool, Softmax
from .pegrad import (attention_pe_grad, conv2d_pe_grad, conv3d_pe_grad, layernorm_pe_grad,
                     linear_pe_grad, linear_pe_sqnorm, lstm_pe_grad, rnn_pe_grad)
from .recurrent import LSTM, RNN

__all__ = [
    "Activation", "Conv2d", "Conv3d", "Flatten", "LSTM", "Layer", "LayerCache", "LayerNorm",
    "Linear", "MaxPool", "Model", "MultiHeadAttention", "RNN", "Sequential", "Softmax",
    "TransformerClassifier", "attention_pe_grad", "conv2d_pe_grad", "conv3d_pe_grad",
    "flatten_params", "layernorm_pe_grad", "linear_pe_grad", "linear_pe_sqnorm", "load_params",
    "lstm_pe_grad", "positional_encoding", "rnn_pe_grad", "save_params",
]
