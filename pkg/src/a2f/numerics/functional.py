"""Layer primitives used by the model, each differentiable through the tape.

Sequence tensors are laid out ``(batch, time, channels)``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node, matmul, tsum

_GELU_C = math.sqrt(2.0 / math.pi)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    y = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias
    return y


def _conv_padding(length: int, kernel: int, stride: int, dilation: int, padding: str) -> tuple[int, int, int]:
    span = (kernel - 1) * dilation + 1
    if padding == "valid":
        if length < span:
            raise ShapeError(f"conv1d: input length {length} shorter than receptive span {span}")
        return 0, 0, (length - span) // stride + 1
    if padding == "same":
        out = -(-length // stride)
        total = max((out - 1) * stride + span - length, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"conv1d: unknown padding {padding!r}")


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: str = "valid",
) -> Tensor:
    """1-D convolution over time.

    ``x`` is ``(B, T, Cin)``, ``weight`` is ``(K, Cin, Cout)``. With ``"same"``
    padding the output has ``ceil(T / stride)`` frames; zero padding is split
    evenly with any odd sample on the right.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected (batch, time, channels) input, got {x.shape}")
    K, cin, cout = weight.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape[2]} != weight in-channels {cin}")
    B, T, _ = x.shape
    left, right, t_out = _conv_padding(T, K, stride, dilation, padding)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0))) if left or right else x.data
    span = (K - 1) * dilation + 1
    # windows: (B, t_out, Cin, span) -> pick dilated taps -> (B, t_out, K, Cin)
    win = sliding_window_view(xp, span, axis=1)[:, ::stride][:, :t_out, :, ::dilation]
    win = np.ascontiguousarray(win.transpose(0, 1, 3, 2))
    wmat = weight.data.reshape(K * cin, cout)
    y = win.reshape(B, t_out, K * cin) @ wmat
    if bias is not None:
        y = y + bias.data

    def bw(g):
        if weight.requires_grad:
            gw = win.reshape(B * t_out, K * cin).T @ g.reshape(B * t_out, cout)
            weight._accumulate(gw.reshape(K, cin, cout))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gwin = (g @ wmat.T).reshape(B, t_out, K, cin)
            gxp = np.zeros_like(xp)
            stop = stride * (t_out - 1) + 1
            for k in range(K):
                off = k * dilation
                gxp[:, off : off + stop : stride] += gwin[:, :, k]
            x._accumulate(gxp[:, left : left + T])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(y, parents, bw, "conv1d")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)
        lead = tuple(range(g.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta is not None and beta.requires_grad:
            beta._accumulate(g.sum(axis=lead))

    if gamma is not None and gamma.shape != (n,):
        raise ShapeError(f"layer_norm: gamma shape {gamma.shape} != ({n},)")
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return make_node(y, parents, bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(xd * (_GELU_C + (_GELU_C * 0.044715) * x2))
    y = 0.5 * xd * (1.0 + th)

    def bw(g):
        du = _GELU_C + (3 * _GELU_C * 0.044715) * x2
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du
        x._accumulate(g * d)

    return make_node(y, (x,), bw, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return make_node(p, (x,), bw, "softmax")


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, num_heads: int,
                   bq=None, bk=None, bv=None, bo=None) -> Tensor:
    """Multi-head softmax self-attention over the time axis of ``(B, T, D)``."""
    B, T, D = x.shape
    if D % num_heads:
        raise ShapeError(f"self_attention: model dim {D} not divisible by {num_heads} heads")
    for w, nm in ((wq, "wq"), (wk, "wk"), (wv, "wv"), (wo, "wo")):
        if w.shape != (D, D):
            raise ShapeError(f"self_attention: {nm} shape {w.shape} != ({D}, {D})")
    dh = D // num_heads

    def split(t):
        return t.reshape(B, T, num_heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    att = softmax(scores, axis=-1)
    ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return linear(ctx, wo, bo)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embedding: ids out of range for table of {n} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return make_node(table.data[ids], (table,), bw, "embedding")


def interp_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` piecewise-linear resampling matrix with both endpoints pinned."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interp: need at least one frame (n_in={n_in}, n_out={n_out})")
    M = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        M[:, 0] = 1.0
        return M
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    M[rows, lo] = 1.0 - frac
    M[rows, lo + 1] += frac
    # land exactly on integral positions despite float rounding
    exact = np.isclose(frac, 0.0, atol=1e-9) | np.isclose(frac, 1.0, atol=1e-9)
    if exact.any():
        idx = np.rint(pos[exact]).astype(np.int64)
        M[rows[exact]] = 0.0
        M[rows[exact], idx] = 1.0
    return M


def temporal_interp(x: Tensor, n_out: int) -> Tensor:
    """Linearly resample ``(B, T, C)`` along time to ``n_out`` frames."""
    if x.ndim != 3:
        raise ShapeError(f"temporal_interp: expected (batch, time, channels), got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("temporal_interp: empty input")
    M = interp_weights(x.shape[1], n_out, dtype=x.data.dtype)
    if n_out == x.shape[1]:
        return x
    y = np.matmul(M, x.data)

    def bw(g):
        x._accumulate(np.matmul(M.T, g))

    return make_node(y, (x,), bw, "temporal_interp")


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return tsum(d * d) * (1.0 / max(pred.size, 1))
