"""Minimal dense numerics: tensors, differentiable ops, Adam, gradient checks."""
from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    ACTIVATION,
    add,
    attention,
    concat,
    cross_entropy,
    exp,
    l2_normalize_cols,
    l2_normalize_rows,
    log,
    log_softmax_rows,
    matmul,
    mean,
    mlp_forward,
    mul,
    reciprocal,
    reshape,
    row_normalize,
    softmax_rows,
    square,
    stop_gradient,
    sub,
    sum,
    take,
    tanh,
    transpose,
)
from .optim import Adam, AdamState, adam_step, grad_check
from .tensor import NonFiniteError, Parameter, Tensor, as_tensor, backward, no_grad


def init_mlp(rng, dims, name: str = "mlp", scale: float = 1.0):
    """Glorot-style init for an MLP with layer sizes ``dims``."""
    import numpy as np

    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, scale * np.sqrt(2.0 / (a + b)), size=(a, b))
        layers.append((Parameter(w, f"{name}.{i}.w"), Parameter(np.zeros(b), f"{name}.{i}.b")))
    return layers
