from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .ops import (
    add,
    conv2d,
    exp,
    forward_op,
    l2_norm,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    sub,
    sum,
    take,
)
from .optim import SGD, sgd_step
from .tensor import DTYPE, Function, ShapeError, Tensor, backward, grad, grad_enabled, no_grad

__all__ = [
    "DTYPE", "Function", "SGD", "ShapeError", "Tensor", "CheckpointError",
    "add", "backward", "check_gradients", "conv2d", "exp", "forward_op", "grad",
    "grad_enabled", "l2_norm", "load_checkpoint", "matmul", "maxpool2d", "mean", "mul",
    "no_grad", "numerical_gradient", "relative_error", "relu", "reshape",
    "save_checkpoint", "scale", "sgd_step", "softmax_cross_entropy", "sub", "sum", "take",
]
