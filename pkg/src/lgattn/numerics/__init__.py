from lgattn.numerics.gradcheck import GradCheckReport, ParamReport, grad_check
from lgattn.numerics.ops import (
    add,
    concat,
    cross_entropy,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    pad,
    reshape,
    scale,
    softmax_masked,
    sub,
    sum,
    swapaxes,
    tanh,
    transpose,
)
from lgattn.numerics.tensor import DEFAULT_DTYPE, Node, Tape, Tensor, as_tensor, current_tape, no_grad

__all__ = [
    "DEFAULT_DTYPE", "GradCheckReport", "Node", "ParamReport", "Tape", "Tensor", "add", "as_tensor",
    "concat", "cross_entropy", "current_tape", "div", "embedding", "exp", "gelu", "getitem", "grad_check",
    "layer_norm", "log", "matmul", "mean", "mul", "no_grad", "pad", "reshape", "scale", "softmax_masked",
    "sub", "sum", "swapaxes", "tanh", "transpose",
]
