"""Minimal float64 tensor library: ops, reverse-mode gradients, optimizers."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import (
    NonFiniteGradient,
    OptimState,
    adam_step,
    clip_grad_norm,
    global_grad_norm,
    sgd_step,
    zero_grad,
)
from .tensor import (
    BackwardWithoutForward,
    NonFiniteValue,
    NumericError,
    Parameter,
    ShapeMismatch,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    embedding_lookup,
    glorot_uniform,
    gradient_check,
    linear,
    make_rng,
    matmul,
    mean,
    mul,
    no_grad,
    numerical_gradient,
    reduce_sum,
    relative_error,
    sigmoid,
    softmax,
    sub,
    take,
    tanh,
)
