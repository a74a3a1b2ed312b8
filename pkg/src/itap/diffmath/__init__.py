from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat_last,
    concat_seq,
    constant,
    cross_entropy,
    cross_entropy_mean,
    dropout,
    embedding,
    layer_norm,
    log_softmax,
    mul,
    passthrough,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax_with_temperature,
    stop_gradient,
    sub,
    swap_axes,
    take_row,
    tensor,
    tensor_matmul,
)
from .net import (
    ParameterStore,
    adam_step,
    causal_self_attention,
    linear,
    mlp_forward,
    transformer_forward,
    transformer_init,
)
