"""Multi-head audio-to-face network and its checkpoint container.

Pipeline: strided TCN over the raw waveform (to 50 Hz) -> transformer encoder
-> frequency adaptor (linear interpolation to the head's fps) -> identity
embedding added to every frame -> dilated residual TCN decoder -> one linear
head per annotation convention -> vertex derivation.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .dataset.manifest import convention_arrays, convention_from_arrays
from .ipca import PcaBasis
from .motion import AnnotationConvention, derive_vertices
from .numerics import (
    ShapeError,
    Tensor,
    conv1d,
    default_dtype,
    embedding,
    gelu,
    layer_norm,
    linear,
    normal_init,
    self_attention,
    temporal_interp,
    uniform_init,
)

FEATURE_HZ = 50
CHECKPOINT_MAGIC = b"UTKR"
PAPER_PIE_PROBABILITY = 0.10
PAPER_DECODER_CHANNELS = 256
PAPER_DECODER_LAYERS = 3


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    sample_rate: int = 16000
    tcn_strides: tuple[int, ...] = (5, 4, 4, 4)
    tcn_kernels: tuple[int, ...] = (10, 8, 8, 8)
    tcn_channels: int = 32
    model_dim: int = 64
    transformer_layers: int = 2
    transformer_heads: int = 4
    adaptor_position: str = "pos1"  # pos0: between TCN and transformer; pos1: after the transformer
    decoder_arch: str = "tcn"  # or "transformer"
    decoder_channels: int = 64
    decoder_layers: int = PAPER_DECODER_LAYERS
    decoder_kernel: int = 3
    pie_probability: float = PAPER_PIE_PROBABILITY
    num_identities: int = 0  # dataset identities; the pivot is appended as the last row
    use_pca: bool = True
    heads: dict[int, int] = field(default_factory=dict)  # convention id -> head output width

    def __post_init__(self):
        self.tcn_strides = tuple(int(s) for s in self.tcn_strides)
        self.tcn_kernels = tuple(int(k) for k in self.tcn_kernels)
        self.heads = {int(k): int(v) for k, v in self.heads.items()}
        self.validate()

    def validate(self) -> None:
        if len(self.tcn_strides) != len(self.tcn_kernels):
            raise ModelError("tcn_strides and tcn_kernels must have equal length")
        if int(np.prod(self.tcn_strides)) * FEATURE_HZ != self.sample_rate:
            raise ModelError(f"TCN stride product {int(np.prod(self.tcn_strides))} x {FEATURE_HZ} Hz "
                             f"!= sample rate {self.sample_rate}")
        if not 0.0 <= self.pie_probability <= 1.0:
            raise ModelError(f"pie_probability must lie in [0, 1], got {self.pie_probability}")
        if self.adaptor_position not in ("pos0", "pos1"):
            raise ModelError(f"adaptor_position must be pos0 or pos1, got {self.adaptor_position!r}")
        if self.decoder_arch not in ("tcn", "transformer"):
            raise ModelError(f"decoder_arch must be tcn or transformer, got {self.decoder_arch!r}")
        if self.model_dim % self.transformer_heads:
            raise ModelError("model_dim must be divisible by transformer_heads")

    @property
    def pivot(self) -> int:
        return self.num_identities

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.tcn_kernels, self.tcn_strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tcn_strides"] = list(self.tcn_strides)
        d["tcn_kernels"] = list(self.tcn_kernels)
        d["heads"] = {str(k): v for k, v in sorted(self.heads.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def head_width(conv: AnnotationConvention, pca: PcaBasis | None, use_pca: bool) -> int:
    if conv.kind == "vertex":
        if use_pca:
            if pca is None:
                raise ModelError(f"convention {conv.name}: PCA head requested but no basis fitted")
            return pca.n_components
        return 3 * conv.vertex_count
    return conv.param_count


def adapted_length(n_frames: int, fps: float) -> int:
    """round(n * fps / 50) with ties to even."""
    return int(np.round(n_frames * fps / FEATURE_HZ))


def adapt_frequency(features: Tensor, target_fps: float) -> Tensor:
    """Resample 50 Hz features ``(B, T, C)`` to ``target_fps`` by linear interpolation."""
    if target_fps <= 0:
        raise ModelError(f"target fps must be positive, got {target_fps}")
    if features.shape[1] == 0:
        raise ModelError("adapt_frequency: empty feature sequence")
    n_out = max(adapted_length(features.shape[1], target_fps), 1)
    return temporal_interp(features, n_out)


def registry_digest(conventions: dict[int, AnnotationConvention]) -> str:
    h = hashlib.sha256()
    for cid in sorted(conventions):
        c = conventions[cid]
        h.update(json.dumps([c.id, c.name, c.kind, float(c.fps), c.vertex_count, c.param_count, float(c.scale)]).encode())
        h.update(io.pack_arrays(b"A2FB", convention_arrays(c)))
    return h.hexdigest()[:16]


class Talker:
    """The network plus the conventions and PCA bases its heads decode through."""

    def __init__(self, config: ModelConfig, conventions: dict[int, AnnotationConvention],
                 pca: dict[int, PcaBasis] | None = None, seed: int = 0, init: bool = True):
        self.config = config
        self.conventions = dict(conventions)
        dtype = default_dtype()
        self.pca = {cid: b.astype(dtype) for cid, b in (pca or {}).items()}
        for cid in self.conventions:
            if cid not in config.heads:
                raise ModelError(f"convention {cid} has no head in the config")
        for cid in config.heads:
            if cid not in self.conventions:
                raise ModelError(f"config declares a head for unknown convention {cid}")
        self.params: dict[str, Tensor] = {}
        if init:
            self.init_params(seed)

    # -- parameters -------------------------------------------------------
    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 1
        for i, k in enumerate(c.tcn_kernels):
            shapes[f"encoder.tcn.{i}.weight"] = (k, cin, c.tcn_channels)
            shapes[f"encoder.tcn.{i}.bias"] = (c.tcn_channels,)
            cin = c.tcn_channels
        shapes["encoder.proj.weight"] = (c.tcn_channels, c.model_dim)
        shapes["encoder.proj.bias"] = (c.model_dim,)
        shapes.update(_transformer_shapes("encoder.tf", c.transformer_layers, c.model_dim))
        shapes["encoder.norm.gamma"] = (c.model_dim,)
        shapes["encoder.norm.beta"] = (c.model_dim,)
        D = c.decoder_channels
        shapes["decoder.in.weight"] = (c.model_dim, D)
        shapes["decoder.in.bias"] = (D,)
        if c.decoder_arch == "tcn":
            for l in range(c.decoder_layers):
                shapes[f"decoder.tcn.{l}.weight"] = (c.decoder_kernel, D, D)
                shapes[f"decoder.tcn.{l}.bias"] = (D,)
        else:
            shapes.update(_transformer_shapes("decoder.tf", c.decoder_layers, D))
        shapes["identity.table"] = (c.num_identities + 1, D)
        for cid, width in sorted(c.heads.items()):
            shapes[f"head.{cid}.weight"] = (D, width)
            shapes[f"head.{cid}.bias"] = (width,)
        return shapes

    def init_params(self, seed: int, only=None) -> None:
        """(Re)initialise parameters; ``only`` filters by name. Each tensor draws from its own stream."""
        dtype = default_dtype()
        shapes = self.param_shapes()
        for idx, (name, shape) in enumerate(shapes.items()):
            if only is not None and not only(name):
                continue
            rng = np.random.default_rng([seed, idx])
            if name.startswith("head."):
                # zero heads start every convention at its neutral / PCA-mean face
                data = np.zeros(shape, dtype=dtype)
            elif name == "identity.table":
                data = normal_init(rng, shape, 0.02, dtype)
            elif name.endswith(".gamma"):
                data = np.ones(shape, dtype=dtype)
            elif name.endswith(".beta"):
                data = np.zeros(shape, dtype=dtype)
            elif name.startswith("encoder.tcn.") and name.endswith(".weight"):
                # He init keeps waveform detail from vanishing under the biases
                data = uniform_init(rng, shape, int(np.prod(shape[:-1])), dtype, gain=math.sqrt(6.0))
            elif name.startswith("encoder.tcn."):
                data = np.zeros(shape, dtype=dtype)
            elif name.endswith(".weight"):
                fan_in = int(np.prod(shape[:-1]))
                data = uniform_init(rng, shape, fan_in, dtype)
            else:  # biases
                w_shape = shapes[name[: -len("bias")] + "weight"]
                data = uniform_init(rng, shape, int(np.prod(w_shape[:-1])), dtype)
            self._add(name, data)

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("encoder.")]

    def head_names(self, cid: int) -> list[str]:
        return [f"head.{cid}.weight", f"head.{cid}.bias"]

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- forward pieces ---------------------------------------------------
    def _tcn_frontend(self, audio: np.ndarray) -> Tensor:
        c = self.config
        audio = np.asarray(audio)
        if audio.ndim == 1:
            audio = audio[None]
        if audio.shape[1] < c.receptive_field:
            raise ModelError(f"audio of {audio.shape[1]} samples is shorter than the "
                             f"{c.receptive_field}-sample receptive field")
        x = Tensor(audio[..., None], dtype=default_dtype())
        for i, s in enumerate(c.tcn_strides):
            x = gelu(conv1d(x, self.p(f"encoder.tcn.{i}.weight"), self.p(f"encoder.tcn.{i}.bias"),
                            stride=s, padding="same"))
        return linear(x, self.p("encoder.proj.weight"), self.p("encoder.proj.bias"))

    def _transformer(self, x: Tensor) -> Tensor:
        c = self.config
        x = _transformer_stack(x, self.params, "encoder.tf", c.transformer_layers, c.transformer_heads)
        return layer_norm(x, self.p("encoder.norm.gamma"), self.p("encoder.norm.beta"))

    def encode_audio(self, audio: np.ndarray, target_fps: float | None = None) -> Tensor:
        """Contextualised audio features, at 50 Hz or adapted to ``target_fps``."""
        x = self._tcn_frontend(audio)
        if self.config.adaptor_position == "pos0":
            if target_fps is not None:
                x = adapt_frequency(x, target_fps)
            return self._transformer(x)
        x = self._transformer(x)
        return adapt_frequency(x, target_fps) if target_fps is not None else x

    def effective_labels(self, labels, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
        """Labels after pivot substitution (train mode only, per sample)."""
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64)).copy()
        n_rows = self.config.num_identities + 1
        bad = labels[(labels < 0) | (labels >= n_rows)]
        if bad.size:
            raise ModelError(f"unknown identity label(s) {bad.tolist()}; valid range 0..{n_rows - 1}")
        if mode == "train" and self.config.pie_probability > 0:
            if rng is None:
                raise ModelError("train-mode identity embedding needs an rng")
            swap = rng.random(labels.size) < self.config.pie_probability
            labels[swap] = self.config.pivot
        elif mode not in ("train", "infer"):
            raise ModelError(f"mode must be train or infer, got {mode!r}")
        return labels

    def embed_identity(self, labels, mode: str = "infer", rng: np.random.Generator | None = None):
        eff = self.effective_labels(labels, mode, rng)
        return embedding(self.p("identity.table"), eff), eff

    def decode_motion(self, features: Tensor, identity: Tensor) -> Tensor:
        c = self.config
        if features.shape[1] < 1:
            raise ModelError("decode_motion: no feature frames")
        x = linear(features, self.p("decoder.in.weight"), self.p("decoder.in.bias"))
        if identity.shape != (x.shape[0], x.shape[2]):
            raise ShapeError(f"identity embedding shape {identity.shape} != ({x.shape[0]}, {x.shape[2]})")
        x = x + identity.reshape(x.shape[0], 1, x.shape[2])
        if c.decoder_arch == "tcn":
            for l in range(c.decoder_layers):
                h = conv1d(x, self.p(f"decoder.tcn.{l}.weight"), self.p(f"decoder.tcn.{l}.bias"),
                           dilation=2 ** l, padding="same")
                x = x + gelu(h)
        else:
            x = _transformer_stack(x, self.params, "decoder.tf", c.decoder_layers, c.transformer_heads)
        return x

    def head_forward(self, hidden: Tensor, cid: int) -> Tensor:
        if cid not in self.config.heads:
            raise ModelError(f"unknown convention {cid}; registered heads: {sorted(self.config.heads)}")
        return linear(hidden, self.p(f"head.{cid}.weight"), self.p(f"head.{cid}.bias"))

    def forward(self, audio: np.ndarray, labels, cid: int, mode: str = "infer",
                rng: np.random.Generator | None = None):
        """Returns ``(head_output (B, T, width), vertices (B, T, V, 3), effective_labels)``."""
        if cid not in self.conventions:
            raise ModelError(f"unknown convention {cid}")
        conv = self.conventions[cid]
        feats = self.encode_audio(audio, conv.fps)
        emb, eff = self.embed_identity(labels, mode, rng)
        hidden = self.decode_motion(feats, emb)
        out = self.head_forward(hidden, cid)
        pca = self.pca.get(cid) if self.config.use_pca else None
        verts = derive_vertices(out, conv, pca)
        return out, verts, eff

    # -- checkpoint -------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param.{n}": t.data for n, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        shapes = self.param_shapes()
        got = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        if strict:
            missing = sorted(set(shapes) - set(got))
            extra = sorted(set(got) - set(shapes))
            if missing or extra:
                raise ModelError(f"checkpoint parameters mismatch: missing={missing} unexpected={extra}")
        dtype = default_dtype()
        for name, shape in shapes.items():
            if name in got:
                if tuple(got[name].shape) != shape:
                    raise ModelError(f"parameter {name}: checkpoint shape {got[name].shape} != {shape}")
                self._add(name, got[name].astype(dtype))

    def clone(self) -> "Talker":
        m = Talker(self.config, self.conventions, self.pca, init=False)
        for n, t in self.params.items():
            m._add(n, t.data.copy())
        return m


def _transformer_shapes(prefix: str, layers: int, dim: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for l in range(layers):
        p = f"{prefix}.{l}"
        for nm in ("ln1", "ln2"):
            shapes[f"{p}.{nm}.gamma"] = (dim,)
            shapes[f"{p}.{nm}.beta"] = (dim,)
        for nm in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{nm}.weight"] = (dim, dim)
            shapes[f"{p}.attn.{nm}.bias"] = (dim,)
        shapes[f"{p}.ff1.weight"] = (dim, 2 * dim)
        shapes[f"{p}.ff1.bias"] = (2 * dim,)
        shapes[f"{p}.ff2.weight"] = (2 * dim, dim)
        shapes[f"{p}.ff2.bias"] = (dim,)
    return shapes


def _transformer_stack(x: Tensor, params: dict[str, Tensor], prefix: str, layers: int, heads: int) -> Tensor:
    # pre-norm residual blocks
    for l in range(layers):
        p = f"{prefix}.{l}"
        h = layer_norm(x, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
        h = self_attention(
            h, params[f"{p}.attn.q.weight"], params[f"{p}.attn.k.weight"], params[f"{p}.attn.v.weight"],
            params[f"{p}.attn.o.weight"], heads,
            params[f"{p}.attn.q.bias"], params[f"{p}.attn.k.bias"], params[f"{p}.attn.v.bias"],
            params[f"{p}.attn.o.bias"],
        )
        x = x + h
        h = layer_norm(x, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
        h = linear(gelu(linear(h, params[f"{p}.ff1.weight"], params[f"{p}.ff1.bias"])),
                   params[f"{p}.ff2.weight"], params[f"{p}.ff2.bias"])
        x = x + h
    return x


# -- checkpoint container ---------------------------------------------------
@dataclass
class Checkpoint:
    model: Talker
    stage: str = "warmup"  # or "joint"
    epoch: int = 0
    extra_arrays: dict[str, np.ndarray] = field(default_factory=dict)  # optimizer moments etc.
    extra_meta: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return registry_digest(self.model.conventions)

    def to_bytes(self) -> bytes:
        m = self.model
        arrays = dict(m.state_arrays())
        for cid, b in m.pca.items():
            arrays[f"pca.{cid}.mean"] = b.mean.astype(np.float32)
            arrays[f"pca.{cid}.components"] = b.components.astype(np.float32)
            arrays[f"pca.{cid}.variance"] = b.explained_variance.astype(np.float32)
        conv_meta = {}
        for cid, c in m.conventions.items():
            for k, v in convention_arrays(c).items():
                arrays[f"conv.{cid}.{k}"] = v
            conv_meta[str(cid)] = {"name": c.name, "kind": c.kind, "fps": float(c.fps), "vertex_count": c.vertex_count,
                                   "param_count": c.param_count, "scale": float(c.scale)}
        arrays.update(self.extra_arrays)
        meta = {
            "config": m.config.to_dict(),
            "conventions": conv_meta,
            "pca": {str(cid): {"frames_seen": b.frames_seen, "provenance": b.provenance} for cid, b in m.pca.items()},
            "digest": self.digest,
            "stage": self.stage,
            "epoch": self.epoch,
            "extra": self.extra_meta,
        }
        return io.pack_arrays(CHECKPOINT_MAGIC, arrays, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        arrays, meta = io.unpack_arrays(blob, CHECKPOINT_MAGIC)
        config = ModelConfig.from_dict(meta["config"])
        conventions = {}
        for key, cm in meta["conventions"].items():
            cid = int(key)
            sub = {k[len(f"conv.{cid}."):]: v for k, v in arrays.items() if k.startswith(f"conv.{cid}.")}
            conventions[cid] = convention_from_arrays(sub, id=cid, **cm)
        pca = {}
        for key, pm in meta["pca"].items():
            cid = int(key)
            pca[cid] = PcaBasis(arrays[f"pca.{cid}.mean"].astype(np.float64),
                                arrays[f"pca.{cid}.components"].astype(np.float64),
                                arrays[f"pca.{cid}.variance"].astype(np.float64),
                                pm["frames_seen"], None, pm["provenance"])
        model = Talker(config, conventions, pca, init=False)
        model.load_state_arrays(arrays)
        extra = {k: v for k, v in arrays.items() if k.startswith("optim.")}
        ck = cls(model, meta["stage"], meta["epoch"], extra, meta.get("extra", {}))
        if ck.digest != meta["digest"]:
            raise ModelError("checkpoint convention digest does not match its stored assets")
        return ck

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
