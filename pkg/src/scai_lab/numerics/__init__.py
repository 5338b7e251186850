from . import backend
from .adam import AdamState, adam_step
from .gradcheck import finite_diff_check, numeric_grad
from .tensor import (
    OP_KINDS, Parameter, ShapeError, Tape, TapeError, Tensor, active_tape, add,
    concat, constant, conv2d, default_dtype, dense, forward_op, grad, l2norm,
    mean, mul, no_grad, precision, relu, scale, sub, sum,
)
