from .core import (
    DimensionError,
    Graph,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    getitem,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    sigmoid,
    stack,
    tanh,
    transpose,
    tsum,
)
from .ops import (
    BatchNormState,
    GruWeights,
    batchnorm2d,
    conv2d,
    gru,
    gru_bidirectional,
    layer_norm,
    linear,
    maxpool2d,
    softmax,
)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "BatchNormState", "DimensionError", "Graph", "GruWeights", "Tensor",
    "adam_step", "add", "as_tensor", "backward", "batchnorm2d", "concat", "conv2d", "getitem",
    "gru", "gru_bidirectional", "layer_norm", "linear", "matmul", "maxpool2d", "mean", "mul",
    "no_grad", "parameter", "relu", "reshape", "sigmoid", "softmax", "stack", "tanh",
    "transpose", "tsum",
]
