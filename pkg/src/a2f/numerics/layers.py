"""Name-based dispatch over the layer primitives plus weight initialisers."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor

LAYER_KINDS = (
    "linear",
    "conv1d",
    "layer_norm",
    "gelu",
    "softmax_self_attention",
    "embedding_lookup",
    "temporal_linear_interp",
)


def layer_forward(kind: str, inputs: Sequence, params: Sequence[Tensor] = (), **options) -> Tensor:
    """Run one primitive by name.

    ``inputs`` holds the data operands (a tensor, or for ``embedding_lookup`` the
    integer ids); ``params`` holds the learned tensors in the order the
    primitive expects. Extra keyword options (stride, padding, heads, ...) are
    forwarded unchanged.
    """
    x = inputs[0]
    try:
        if kind == "linear":
            return F.linear(x, *params)
        if kind == "conv1d":
            return F.conv1d(x, *params, **options)
        if kind == "layer_norm":
            return F.layer_norm(x, *params, **options)
        if kind == "gelu":
            return F.gelu(x)
        if kind == "softmax_self_attention":
            return F.self_attention(x, *params, num_heads=options.get("num_heads", 1))
        if kind == "embedding_lookup":
            return F.embedding(params[0], x)
        if kind == "temporal_linear_interp":
            return F.temporal_interp(x, options["n_out"])
    except ShapeError as err:
        raise ShapeError(f"[{kind}] {err}") from None
    raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32, gain: float = 1.0) -> np.ndarray:
    """U(-b, b) with ``b = gain * sqrt(1 / fan_in)``; ``gain = sqrt(6)`` gives He-uniform."""
    bound = gain * math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(size=shape) * std).astype(dtype)
