from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

PAPER_LR = 1e-4


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = PAPER_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``.

    Parameters without an entry in ``grads`` (frozen or unreachable) are left
    untouched, and so are their moment buffers.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.data = p.data - update
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = PAPER_LR, **kw):
        self.params = params
        self.state = AdamState(lr=lr, **kw)

    def step(self, trainable: set[str] | None = None) -> None:
        grads = {}
        for name, p in self.params.items():
            if trainable is not None and name not in trainable:
                continue
            if p.grad is not None:
                grads[name] = p.grad
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
