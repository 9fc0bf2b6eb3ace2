from .gradcheck import NonFiniteLoss, Probe, grad_check, grad_check_report, relative_error
from .ops import (
    activation,
    add,
    batch_norm,
    channel_scale,
    concat,
    conv2d,
    div,
    dropout,
    encoding_aggregate,
    linear,
    log,
    max_pool2d,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    sub,
    transpose,
    upsample2x,
)
from .ops import sum as tsum
from .tensor import (
    BranchTape,
    Graph,
    ShapeError,
    Tensor,
    backward,
    branch_tape,
    get_dtype,
    get_precision,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "BranchTape", "Graph", "NonFiniteLoss", "Probe", "branch_tape", "grad_check_report", "ShapeError", "Tensor", "activation", "add", "backward",
    "batch_norm", "channel_scale", "concat", "conv2d", "div", "dropout", "encoding_aggregate",
    "get_dtype", "get_precision", "grad_check", "linear", "log", "max_pool2d", "mean", "mul",
    "no_grad", "precision", "relative_error", "relu", "reshape", "set_precision", "sigmoid",
    "softmax", "square", "sub", "transpose", "tsum", "upsample2x",
]
