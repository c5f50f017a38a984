"""Reverse-mode vs central-difference checks for every layer primitive and a tiny end-to-end model."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as model_mod
from .numerics import (
    LAYER_KINDS,
    Tensor,
    finite_difference_grad,
    functional,
    layer_forward,
    make_node,
    precision,
    relative_error,
)

LAYER_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
FD_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def _param(rng, *shape, scale=0.5):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _layer_case(kind: str, rng: np.random.Generator):
    """Random operands for one primitive: (tensors to check, forward closure)."""
    B, T = int(rng.integers(1, 3)), int(rng.integers(3, 7))
    C, D = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    if kind == "linear":
        x, w, b = _param(rng, B, T, C), _param(rng, C, D), _param(rng, D)
        return [x, w, b], lambda: layer_forward(kind, [x], [w, b])
    if kind == "conv1d":
        K = int(rng.integers(1, 4))
        stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        padding = "same" if rng.random() < 0.5 else "valid"
        T = max(T, (K - 1) * dilation + 1)
        x, w, b = _param(rng, B, T, C), _param(rng, K, C, D), _param(rng, D)
        return [x, w, b], lambda: layer_forward(kind, [x], [w, b], stride=stride, dilation=dilation, padding=padding)
    if kind == "layer_norm":
        x, g, b = _param(rng, B, T, C, scale=1.0), _param(rng, C), _param(rng, C)
        return [x, g, b], lambda: layer_forward(kind, [x], [g, b])
    if kind == "gelu":
        x = _param(rng, B, T, C, scale=1.5)
        return [x], lambda: layer_forward(kind, [x])
    if kind == "softmax_self_attention":
        heads = int(rng.integers(1, 3))
        dim = heads * int(rng.integers(1, 3))
        x = _param(rng, B, T, dim)
        ws = [_param(rng, dim, dim) for _ in range(4)]
        return [x] + ws, lambda: layer_forward(kind, [x], ws, num_heads=heads)
    if kind == "embedding_lookup":
        table = _param(rng, 5, C)
        ids = rng.integers(0, 5, size=(B,))
        return [table], lambda: layer_forward(kind, [ids], [table])
    if kind == "temporal_linear_interp":
        x = _param(rng, B, T, C)
        n_out = int(rng.integers(1, 10))
        return [x], lambda: layer_forward(kind, [x], n_out=n_out)
    raise ValueError(f"unknown layer kind {kind!r}")


def _check_case(tensors: list[Tensor], forward: Callable[[], Tensor], rng: np.random.Generator,
                max_coords: int | None = None) -> float:
    """Max relative error over every checked tensor of the scalar ``sum(out * R)``."""
    out = forward()
    R = rng.standard_normal(out.shape)

    def loss() -> Tensor:
        return (forward() * R).sum()

    for t in tensors:
        t.grad = None
    loss().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(coords.size)
        orig = t.data
        for j, i in enumerate(coords):
            def f(v, i=i):
                data = orig.copy().reshape(-1)
                data[i] = v[0]
                t.data = data.reshape(orig.shape)
                try:
                    return loss().item()
                finally:
                    t.data = orig
            num[j] = finite_difference_grad(f, flat[i : i + 1], FD_EPS)[0]
        worst = max(worst, relative_error(analytic.reshape(-1)[coords], num))
    return worst


def check_layers(seeds: int = 20, kinds=LAYER_KINDS) -> list[CheckResult]:
    results = []
    with precision(np.float64):
        for kind in kinds:
            t0 = time.perf_counter()
            worst = 0.0
            for s in range(seeds):
                rng = np.random.default_rng([s, LAYER_KINDS.index(kind)])
                tensors, fwd = _layer_case(kind, rng)
                worst = max(worst, _check_case(tensors, fwd, rng))
            results.append(CheckResult(kind, seeds, worst, LAYER_TOLERANCE, time.perf_counter() - t0))
    return results


def tiny_model(seed: int):
    """A float64 three-convention model small enough for finite differences."""
    from .dataset.synth import make_convention
    from .ipca import fit_exact
    from .model import ModelConfig, Talker, head_width

    convs = {i: make_convention(i, k, seed) for i, k in enumerate(("vertex", "blendshape", "skeleton"))}
    rng = np.random.default_rng([seed, 9])
    pca = {0: fit_exact(rng.standard_normal((30, 3 * convs[0].vertex_count)) * 0.05, 3)}
    cfg = ModelConfig(tcn_channels=3, model_dim=4, transformer_layers=1, transformer_heads=2, decoder_channels=4,
                      decoder_layers=2, num_identities=3,
                      heads={c: head_width(v, pca.get(c), True) for c, v in convs.items()})
    model = Talker(cfg, convs, pca, seed=seed)
    # zero-initialised heads would hide upstream gradients; give them random values
    for name in model.params:
        if name.startswith("head."):
            model.params[name].data = rng.standard_normal(model.params[name].shape) * 0.3
    return model


def check_end_to_end(seeds: int = 20, coords_per_tensor: int = 3) -> CheckResult:
    from .training import compute_loss

    t0 = time.perf_counter()
    worst = 0.0
    with precision(np.float64):
        for s in range(seeds):
            model = tiny_model(s)
            rng = np.random.default_rng([s, 10])
            cid = int(s % 3)
            conv = model.conventions[cid]
            audio = rng.standard_normal((2, 1600)) * 0.3
            labels = rng.integers(0, 3, size=2)
            out, verts, _ = model.forward(audio, labels, cid)
            gt_v = verts.data + rng.standard_normal(verts.shape) * 0.01
            gt_n = out.data + rng.standard_normal(out.shape) * 0.1
            tensors = list(model.params.values())

            def fwd():
                o, v, _ = model.forward(audio, labels, cid)
                return compute_loss(v, gt_v, o, gt_n, conv.kind)

            # the scalar loss itself is the checked function, so R is a single 1
            worst = max(worst, _check_case([t for t in tensors], fwd, np.random.default_rng([s, 11]),
                                           max_coords=coords_per_tensor))
    return CheckResult("end_to_end", seeds, worst, END_TO_END_TOLERANCE, time.perf_counter() - t0)


def run_suite(seeds: int = 20) -> list[CheckResult]:
    return check_layers(seeds) + [check_end_to_end(seeds)]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<26}{'seeds':>6}{'max_rel_err':>14}{'tol':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<26}{r.seeds:>6}{r.max_rel_error:>14.3e}{r.tolerance:>9.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


@contextlib.contextmanager
def inject_fault(kind: str = "conv1d", factor: float = 1.1):
    """Temporarily corrupt the backward pass of a primitive (mutation testing)."""
    targets = {"conv1d": "conv1d", "gelu": "gelu", "layer_norm": "layer_norm", "linear": "linear"}
    if kind not in targets:
        raise ValueError(f"cannot inject a fault into {kind!r}")
    attr = targets[kind]
    original = getattr(functional, attr)

    def broken(*args, **kw):
        y = original(*args, **kw)
        return make_node(y.data, (y,), lambda g: y._accumulate(g * factor), f"faulty_{attr}")

    patched = [(functional, attr)]
    if hasattr(model_mod, attr):
        patched.append((model_mod, attr))
    saved = [(mod, getattr(mod, attr)) for mod, _ in patched]
    try:
        for mod, _ in patched:
            setattr(mod, attr, broken)
        yield
    finally:
        for mod, fn in saved:
            setattr(mod, attr, fn)
