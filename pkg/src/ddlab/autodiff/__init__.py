from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, NondeterministicFunctionError, check_gradient
from .optim import OptimizerState, cosine_lr, optimizer_step
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp,
    concat,
    div,
    embedding,
    exp,
    forward_primitive,
    frozen,
    gelu,
    grad_of,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    slice_,
    softmax,
    sub,
    sum_,
    swap_last,
    transpose,
)
