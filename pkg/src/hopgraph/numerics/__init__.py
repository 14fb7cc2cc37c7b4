"""Dense tensors with analytic gradients, losses and optimisers."""
from hopgraph.numerics import ops
from hopgraph.numerics.gradcheck import GradCheckReport, finite_difference_check
from hopgraph.numerics.losses import class_balanced_weights, focal_loss
from hopgraph.numerics.ops import (
    cross_entropy,
    embedding_lookup,
    focal_cross_entropy,
    gelu,
    layer_norm,
    linear,
    matmul,
    renormalize_rows,
    softmax_rows,
)
from hopgraph.numerics.optim import SGD, OptimizerConfig, sgd_step, zero_grad
from hopgraph.numerics.tensor import Parameter, Tensor, backward

__all__ = [
    "GradCheckReport",
    "OptimizerConfig",
    "SGD",
    "Parameter",
    "Tensor",
    "backward",
    "class_balanced_weights",
    "cross_entropy",
    "embedding_lookup",
    "finite_difference_check",
    "focal_cross_entropy",
    "focal_loss",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "ops",
    "renormalize_rows",
    "sgd_step",
    "softmax_rows",
    "zero_grad",
]
