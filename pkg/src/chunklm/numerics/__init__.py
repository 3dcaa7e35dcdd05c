from .gradcheck import grad_check
from .ops import (
    IGNORE_INDEX,
    add,
    causal_conv1d,
    causal_softmax,
    concat,
    cross_entropy,
    detach,
    elementwise,
    embedding,
    exp,
    gelu,
    matmul,
    mean_pool_tokens,
    mul,
    neg,
    reshape,
    sigmoid,
    softmax,
    square,
    sub,
    tanh,
    tensor_sum,
    transpose,
)
from .optim import ConfigError, adamw_step, clip_grad_norm, init_moments, lr_at
from .tensor import NumericError, Tensor, as_tensor, live_floats, make_op, no_grad, peak_floats, reset_peak
