import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    backward,
    concat,
    cos,
    default_dtype,
    exp,
    grad_enabled,
    make_node,
    matmul,
    no_grad,
    precision,
    sin,
    sqrt,
    stack,
    tanh,
)
from . import functional
from .functional import conv1d, embedding, gelu, layer_norm, linear, mse, self_attention, softmax, temporal_interp
from .gradcheck import finite_difference_grad, relative_error
from .layers import LAYER_KINDS, layer_forward, normal_init, uniform_init
from .optim import PAPER_LR, Adam, AdamState, NonFiniteGradient, adam_step



def reverse_mode(output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate a scalar and return one gradient per named parameter.

    Parameters with no path to ``output`` get an exact zero array.
    """
    for p in params.values():
        p.grad = None
    backward(output)
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in params.items()}


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical draw sequences."""
    return np.random.default_rng(np.uint64(seed))
