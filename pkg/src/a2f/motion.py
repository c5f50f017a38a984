"""Annotation conventions and differentiable vertex derivation for every head kind."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ipca import PcaBasis
from .numerics import Tensor, cos, matmul, sin, sqrt, stack

KINDS = ("vertex", "blendshape", "skeleton")

# vertex-space scale factors used for two of the public corpora
BIWI_SCALE = 0.2
MULTIFACE_SCALE = 0.001


class ConventionError(ValueError):
    pass


@dataclass
class BlendshapeBasis:
    mean_shape: np.ndarray  # (V, 3)
    bases: np.ndarray  # (B, V, 3)

    def __post_init__(self):
        if self.bases.ndim != 3 or self.bases.shape[0] < 1:
            raise ConventionError(f"blendshape bases must be (B>=1, V, 3), got {self.bases.shape}")
        if self.bases.shape[1:] != self.mean_shape.shape:
            raise ConventionError("blendshape bases and mean shape disagree on vertex count")

    @property
    def count(self) -> int:
        return self.bases.shape[0]


@dataclass
class LbsRig:
    rest_pose: np.ndarray  # (V, 3)
    joints: np.ndarray  # (J, 3)
    parents: list[int]  # -1 for the root; parents[j] < j
    weights: np.ndarray  # (V, J)

    def __post_init__(self):
        J = self.joints.shape[0]
        if len(self.parents) != J:
            raise ConventionError(f"rig has {J} joints but {len(self.parents)} parent entries")
        if self.parents[0] != -1 or any(p != -1 and not 0 <= p < j for j, p in enumerate(self.parents)) \
                or sum(p == -1 for p in self.parents) != 1:
            raise ConventionError(f"rig parents must form a tree rooted at joint 0 in topological order: {self.parents}")
        if self.weights.shape != (self.rest_pose.shape[0], J):
            raise ConventionError(f"blendweights shape {self.weights.shape} != ({self.rest_pose.shape[0]}, {J})")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-6):
            raise ConventionError("blendweight rows must be non-negative and sum to 1")

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]


@dataclass
class AnnotationConvention:
    id: int
    name: str
    kind: str
    fps: float
    vertex_count: int
    param_count: int
    scale: float
    lip_mask: np.ndarray
    upper_face_mask: np.ndarray
    neutral_template: np.ndarray  # (V, 3)
    blendshape_basis: Optional[BlendshapeBasis] = None
    lbs_rig: Optional[LbsRig] = None
    pca_basis_id: Optional[str] = None

    def __post_init__(self):
        V = self.vertex_count
        if self.kind not in KINDS:
            raise ConventionError(f"convention {self.name!r}: unknown kind {self.kind!r}")
        if self.scale <= 0:
            raise ConventionError(f"convention {self.name!r}: scale must be positive")
        if self.neutral_template.shape != (V, 3):
            raise ConventionError(f"convention {self.name!r}: template shape {self.neutral_template.shape} != ({V}, 3)")
        if self.kind == "vertex" and self.param_count != 0:
            raise ConventionError(f"convention {self.name!r}: vertex kind must have param_count 0")
        if self.kind == "blendshape":
            if self.blendshape_basis is None:
                raise ConventionError(f"convention {self.name!r}: blendshape kind needs a basis")
            if self.blendshape_basis.count != self.param_count or self.blendshape_basis.mean_shape.shape != (V, 3):
                raise ConventionError(f"convention {self.name!r}: basis does not match P={self.param_count}, V={V}")
        if self.kind == "skeleton":
            if self.lbs_rig is None:
                raise ConventionError(f"convention {self.name!r}: skeleton kind needs a rig")
            if 3 * self.lbs_rig.num_joints != self.param_count or self.lbs_rig.rest_pose.shape != (V, 3):
                raise ConventionError(f"convention {self.name!r}: rig does not match P={self.param_count}, V={V}")
        for label, mask in (("lip", self.lip_mask), ("upper_face", self.upper_face_mask)):
            mask = np.asarray(mask)
            if mask.size == 0 or len(np.unique(mask)) != mask.size or mask.min() < 0 or mask.max() >= V:
                raise ConventionError(f"convention {self.name!r}: {label} mask must hold distinct indices < {V}")

    @property
    def native_dim(self) -> int:
        """Width of one stored motion frame: 3V displacements or P parameters."""
        return 3 * self.vertex_count if self.kind == "vertex" else self.param_count


@dataclass
class MotionSequence:
    convention_id: int
    fps: float
    frames: np.ndarray  # (T, dim)
    identity_label: int = -1

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ValueError(f"motion frames must be (T, dim), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def blendshape_to_vertices(weights, basis: BlendshapeBasis) -> Tensor:
    """Mean shape plus weighted basis shapes; ``weights`` (..., B) -> (..., V, 3)."""
    w = _as_tensor(weights)
    if w.shape[-1] != basis.count:
        raise ConventionError(f"blendshape weights have length {w.shape[-1]}, basis has {basis.count}")
    V = basis.mean_shape.shape[0]
    flat = Tensor(basis.bases.reshape(basis.count, 3 * V), dtype=w.dtype)
    out = matmul(w, flat) + Tensor(basis.mean_shape.reshape(-1), dtype=w.dtype)
    return out.reshape(*w.shape[:-1], V, 3)


# K = skew(k) as a linear map of k: K[j, l] = sum_i k[i] * _SKEW[i, j, l]
_SKEW = np.zeros((3, 3, 3))
_SKEW[0, 1, 2], _SKEW[0, 2, 1] = -1.0, 1.0
_SKEW[1, 0, 2], _SKEW[1, 2, 0] = 1.0, -1.0
_SKEW[2, 0, 1], _SKEW[2, 1, 0] = -1.0, 1.0


def rodrigues(rotvec: Tensor) -> Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3). Zero vectors map to I exactly."""
    dt = rotvec.dtype
    theta = sqrt((rotvec * rotvec).sum(axis=-1, keepdims=True) + 1e-24)
    axis = rotvec / theta
    K = matmul(axis, Tensor(_SKEW.reshape(3, 9), dtype=dt)).reshape(*rotvec.shape[:-1], 3, 3)
    th = theta.reshape(*theta.shape, 1)
    eye = Tensor(np.eye(3), dtype=dt)
    return eye + sin(th) * K + (1.0 - cos(th)) * matmul(K, K)


def lbs_to_vertices(pose, rig: LbsRig) -> Tensor:
    """Linear blend skinning; ``pose`` (..., 3J) axis-angle per joint -> (..., V, 3)."""
    pose = _as_tensor(pose)
    J = rig.num_joints
    if pose.shape[-1] != 3 * J:
        raise ConventionError(f"pose has length {pose.shape[-1]}, rig expects {3 * J}")
    dt = pose.dtype
    lead = pose.shape[:-1]
    rots = rodrigues(pose.reshape(*lead, J, 3))
    joints = rig.joints.astype(np.float64)
    glob_rot: list[Tensor] = []
    glob_pos: list[Tensor] = []
    for j in range(J):
        R_j = rots[(Ellipsis, j, slice(None), slice(None))]
        p = rig.parents[j]
        if p < 0:
            glob_rot.append(R_j)
            glob_pos.append(Tensor(np.broadcast_to(joints[j], (*lead, 3)).copy(), dtype=dt))
        else:
            off = Tensor(joints[j] - joints[p], dtype=dt)
            pos = matmul(glob_rot[p], off.reshape(3, 1)).reshape(*lead, 3) + glob_pos[p]
            glob_rot.append(matmul(glob_rot[p], R_j))
            glob_pos.append(pos)
    out = None
    rest = rig.rest_pose.astype(np.float64)
    for j in range(J):
        local = Tensor(rest - joints[j], dtype=dt)  # (V, 3)
        moved = matmul(local, glob_rot[j].swapaxes(-1, -2)) + glob_pos[j].reshape(*lead, 1, 3)
        term = moved * Tensor(rig.weights[:, j : j + 1], dtype=dt)
        out = term if out is None else out + term
    return out


def scale_vertices(vertices, factor: float):
    if factor <= 0:
        raise ConventionError(f"scale factor must be positive, got {factor}")
    return vertices * factor


def derive_vertices(head_output, convention: AnnotationConvention, pca: PcaBasis | None = None) -> Tensor:
    """Scaled per-frame vertices (..., V, 3) from a head's native output.

    Vertex heads emit PCA values when ``pca`` is given and raw 3V
    displacements otherwise.
    """
    y = _as_tensor(head_output)
    V = convention.vertex_count
    if convention.kind == "vertex":
        if pca is not None:
            disp = pca.reconstruct(y)
        else:
            if y.shape[-1] != 3 * V:
                raise ConventionError(f"{convention.name}: raw vertex head must emit {3 * V} values, got {y.shape[-1]}")
            disp = y
        verts = disp.reshape(*y.shape[:-1], V, 3) + Tensor(convention.neutral_template, dtype=y.dtype)
    elif convention.kind == "blendshape":
        if convention.blendshape_basis is None:
            raise ConventionError(f"{convention.name}: missing blendshape basis")
        verts = blendshape_to_vertices(y, convention.blendshape_basis)
    else:
        if convention.lbs_rig is None:
            raise ConventionError(f"{convention.name}: missing LBS rig")
        verts = lbs_to_vertices(y, convention.lbs_rig)
    return scale_vertices(verts, convention.scale)


def native_to_vertices(frames: np.ndarray, convention: AnnotationConvention) -> np.ndarray:
    """Scaled vertices for stored ground-truth frames (no PCA truncation)."""
    return derive_vertices(Tensor(np.asarray(frames, dtype=np.float64), dtype=np.float64), convention, None).data
