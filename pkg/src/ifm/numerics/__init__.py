"""Minimal dense-array math: autodiff tape, AdamW, seeded distributions."""

from ifm.numerics.autodiff import (
    Array,
    GradientTape,
    add,
    add_rows,
    backward,
    concat,
    cross_entropy_logits,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    mse,
    multiply,
    parameter,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    set_finite_checks,
    softmax,
    split,
    subtract,
    transpose,
    weighted_sum,
)
from ifm.numerics.optim import AdamW
from ifm.numerics.random import RngStream

__all__ = [
    "Array",
    "GradientTape",
    "AdamW",
    "RngStream",
    "add",
    "add_rows",
    "backward",
    "concat",
    "cross_entropy_logits",
    "embedding",
    "gather_rows",
    "gelu",
    "layer_norm",
    "masked_softmax",
    "matmul",
    "mse",
    "multiply",
    "parameter",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scale",
    "set_finite_checks",
    "softmax",
    "split",
    "subtract",
    "transpose",
    "weighted_sum",
]
