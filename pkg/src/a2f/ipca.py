"""PCA bases for vertex annotations: a streaming (incremental SVD) fit and an exact oracle.

The incremental fit follows the mean-augmented SVD update of Ross et al.:
each batch is centred on its own mean, stacked under the current components
scaled by their singular values together with one mean-correction row, and the
stack is re-decomposed and truncated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import io
from .numerics import Tensor, matmul

PAPER_COMPONENTS = 512
PAPER_BATCH_SIZE = 1024
DESK_COMPONENTS = 8
DESK_BATCH_SIZE = 64


class PcaError(ValueError):
    pass


@dataclass
class PcaBasis:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (L, D), orthonormal rows
    explained_variance: np.ndarray  # (L,), non-increasing
    frames_seen: int
    singular_values: np.ndarray = field(default=None, repr=False)
    provenance: str = ""  # which frames the basis was fitted on, e.g. "train"

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        """PCA values of displacement vectors ``x`` (..., D) -> (..., L)."""
        x = np.asarray(x)
        if x.shape[-1] != self.dim:
            raise PcaError(f"project: input dim {x.shape[-1]} != basis dim {self.dim}")
        return (x - self.mean) @ self.components.T

    def reconstruct(self, values):
        """``values @ W_L + mean``; differentiable when ``values`` is a Tensor."""
        if isinstance(values, Tensor):
            if values.shape[-1] != self.n_components:
                raise PcaError(f"reconstruct: got {values.shape[-1]} values, basis has {self.n_components}")
            W = Tensor(self.components, dtype=values.dtype)
            return matmul(values, W) + Tensor(self.mean, dtype=values.dtype)
        values = np.asarray(values)
        if values.shape[-1] != self.n_components:
            raise PcaError(f"reconstruct: got {values.shape[-1]} values, basis has {self.n_components}")
        return values @ self.components + self.mean

    def astype(self, dtype) -> "PcaBasis":
        return PcaBasis(
            self.mean.astype(dtype),
            self.components.astype(dtype),
            self.explained_variance.astype(dtype),
            self.frames_seen,
            None if self.singular_values is None else self.singular_values.astype(dtype),
            self.provenance,
        )


def _svd_flip(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each component made positive, for reproducible signs
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def fit_exact(frames: np.ndarray, n_components: int, provenance: str = "") -> PcaBasis:
    """Centre, take a full SVD, keep the top ``n_components`` right singular vectors."""
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2:
        raise PcaError(f"fit_exact expects a (frames, dim) matrix, got {X.shape}")
    F, D = X.shape
    if F < 2:
        raise PcaError("fit_exact needs at least two frames")
    if not np.all(np.isfinite(X)):
        raise PcaError("fit_exact: non-finite input")
    L = min(n_components, F, D)
    mean = X.mean(axis=0)
    u, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    u, vt = _svd_flip(u, vt)
    return PcaBasis(mean, vt[:L], s[:L] ** 2 / (F - 1), F, s[:L], provenance)


class IncrementalPca:
    """Streaming fitter; feed batches with :meth:`partial_fit`, read :attr:`basis`."""

    def __init__(self, n_components: int):
        if n_components < 1:
            raise PcaError("n_components must be positive")
        self.n_components = n_components
        self.n_seen = 0
        self.mean: np.ndarray | None = None
        self.components: np.ndarray | None = None
        self.singular_values: np.ndarray | None = None

    def partial_fit(self, batch: np.ndarray) -> "IncrementalPca":
        X = np.asarray(batch, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise PcaError(f"partial_fit expects a non-empty (n, dim) batch, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise PcaError("partial_fit: non-finite input")
        n = X.shape[0]
        batch_mean = X.mean(axis=0)
        if self.n_seen == 0:
            stacked = X - batch_mean
            new_mean = batch_mean
        else:
            if X.shape[1] != self.mean.shape[0]:
                raise PcaError(f"partial_fit: batch dim {X.shape[1]} != {self.mean.shape[0]}")
            total = self.n_seen + n
            new_mean = (self.n_seen * self.mean + n * batch_mean) / total
            correction = np.sqrt(self.n_seen * n / total) * (self.mean - batch_mean)
            stacked = np.vstack([self.singular_values[:, None] * self.components, X - batch_mean, correction])
        u, s, vt = np.linalg.svd(stacked, full_matrices=False)
        u, vt = _svd_flip(u, vt)
        keep = min(self.n_components, vt.shape[0])
        self.components = vt[:keep]
        self.singular_values = s[:keep]
        self.mean = new_mean
        self.n_seen += n
        return self

    def basis(self, provenance: str = "") -> PcaBasis:
        if self.n_seen < 2:
            raise PcaError("incremental PCA has seen fewer than two frames")
        ev = self.singular_values ** 2 / (self.n_seen - 1)
        return PcaBasis(self.mean.copy(), self.components.copy(), ev, self.n_seen,
                        self.singular_values.copy(), provenance)


def fit_incremental(
    frames: np.ndarray | Iterable[np.ndarray],
    n_components: int = DESK_COMPONENTS,
    batch_size: int = DESK_BATCH_SIZE,
    provenance: str = "",
) -> PcaBasis:
    """Fit on a pre-shuffled frame matrix (or an iterable of frame batches).

    The stream must contain at least ``n_components`` frames.
    """
    ipca = IncrementalPca(n_components)
    if isinstance(frames, np.ndarray):
        if frames.ndim != 2:
            raise PcaError(f"expected (frames, dim) matrix, got {frames.shape}")
        if frames.shape[0] < n_components:
            raise PcaError(f"{frames.shape[0]} frames < {n_components} requested components")
        batches = (frames[i : i + batch_size] for i in range(0, frames.shape[0], batch_size))
    else:
        batches = iter(frames)
    for b in batches:
        ipca.partial_fit(b)
    if ipca.n_seen < n_components:
        raise PcaError(f"{ipca.n_seen} frames < {n_components} requested components")
    return ipca.basis(provenance)


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles in degrees between the row spaces of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(np.asarray(a, dtype=np.float64).T)
    qb, _ = np.linalg.qr(np.asarray(b, dtype=np.float64).T)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.degrees(np.arccos(np.clip(s, -1.0, 1.0)))


BASIS_MAGIC = b"A2FP"


def save_basis(path, basis: PcaBasis) -> None:
    arrays = {"mean": basis.mean, "components": basis.components, "explained_variance": basis.explained_variance}
    if basis.singular_values is not None:
        arrays["singular_values"] = basis.singular_values
    io.save_arrays(path, BASIS_MAGIC, arrays, {"frames_seen": basis.frames_seen, "provenance": basis.provenance})


def load_basis(path) -> PcaBasis:
    arrays, meta = io.load_arrays(path, BASIS_MAGIC)
    return PcaBasis(arrays["mean"], arrays["components"], arrays["explained_variance"], int(meta["frames_seen"]),
                    arrays.get("singular_values"), meta.get("provenance", ""))
