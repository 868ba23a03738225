from .core import Graph, GraphError, Node, ShapeError, Tensor, as_tensor, backward
from .ops import (
    add,
    batch_norm,
    bias_add,
    concat,
    elementwise,
    flatten,
    leaky_relu,
    log_softmax,
    matmul,
    mul,
    negate,
    reduce,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_batch,
    softplus,
    squared_l2,
    sub,
    tanh,
)
from .conv import conv2d, conv2d_transpose
from .gradcheck import GradCheckReport, grad_check, grad_check_params

__all__ = [
    "Graph", "GraphError", "Node", "ShapeError", "Tensor", "as_tensor", "backward",
    "add", "batch_norm", "bias_add", "concat", "elementwise", "flatten", "leaky_relu",
    "log_softmax", "matmul", "mul", "negate", "reduce", "reduce_mean", "reduce_sum", "relu",
    "reshape", "scale", "sigmoid", "slice_batch", "softplus", "squared_l2", "sub", "tanh",
    "conv2d", "conv2d_transpose",
    "GradCheckReport", "grad_check", "grad_check_params",
]
