"""Synthetic multi-convention corpus ("A2F-mini").

Audio is a chain of short tone segments drawn from a few fixed bands. A hidden
teacher turns per-frame band amplitudes into motion: a fixed linear mix per
convention, modulated by a per-identity gain on each band. Silence therefore
maps to the neutral face, and the mapping is learnable from audio alone once
the identity is known.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io
from ..motion import AnnotationConvention, BlendshapeBasis, LbsRig
from .manifest import DEFAULT_SAMPLE_RATE, ConventionEntry, DatasetManifest, SequenceRecord, write_manifest
from .ops import frame_count, split_records

log = logging.getLogger(__name__)

BAND_HZ = (220.0, 587.0, 1480.0, 3520.0)
KIND_DEFAULTS = {
    # fps, vertex count, param count, scale
    "vertex": (25.0, 48, 0, 0.2),
    "blendshape": (30.0, 40, 8, 1.0),
    "skeleton": (30.0, 36, 6, 1.0),
}


@dataclass
class SynthSpec:
    conventions: list[str] = field(default_factory=lambda: ["vertex", "blendshape", "skeleton"])
    identities: int = 4
    sequences: int = 40  # per convention
    seconds: float = 3.0
    seed: int = 7
    sample_rate: int = DEFAULT_SAMPLE_RATE
    duplication: list[int] | None = None


def _kind_of(entry: str) -> str:
    kind = entry.split(":")[0]
    if kind not in KIND_DEFAULTS:
        raise ValueError(f"unknown convention kind {kind!r}; expected one of {sorted(KIND_DEFAULTS)}")
    return kind


def _f32(x: np.ndarray) -> np.ndarray:
    # assets are stored as float32, so generate them float32-exact
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _face_points(rng: np.random.Generator, V: int) -> np.ndarray:
    u = rng.uniform(-0.9, 0.9, size=V)
    v = rng.uniform(-1.0, 1.0, size=V)
    x, y = 0.07 * u, 0.1 * v
    z = 0.06 * np.sqrt(np.clip(1.0 - u ** 2 * 0.8 - v ** 2 * 0.5, 0.05, None))
    return np.stack([x, y, z], axis=1)


def _masks(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    V = pts.shape[0]
    mouth = np.array([0.0, -0.05, pts[:, 2].max()])
    lip = np.sort(np.argsort(np.linalg.norm(pts - mouth, axis=1), kind="stable")[: max(4, V // 6)])
    upper = np.flatnonzero(pts[:, 1] > 0.02)
    if upper.size == 0:
        upper = np.array([int(np.argmax(pts[:, 1]))])
    return lip.astype(np.int64), upper.astype(np.int64)


def make_convention(cid: int, entry: str, seed: int) -> AnnotationConvention:
    """Deterministic geometry and rig assets for one synthetic convention."""
    kind = _kind_of(entry)
    fps, V, P, scale = KIND_DEFAULTS[kind]
    rng = np.random.default_rng([seed, 1000 + cid])
    pts = _face_points(rng, V)
    lip, upper = _masks(pts)
    name = f"{kind}{cid}"
    if kind == "vertex":
        # original (unscaled) space: coordinates divided by the convention scale
        return AnnotationConvention(cid, name, kind, fps, V, 0, scale, lip, upper, _f32(pts / scale))
    if kind == "blendshape":
        mouth = np.array([0.0, -0.05, pts[:, 2].max()])
        local = np.exp(-np.sum((pts - mouth) ** 2, axis=1) / (2 * 0.04 ** 2))
        raw = rng.standard_normal((P, V, 3)) * (0.3 + local[None, :, None])
        q, _ = np.linalg.qr(raw.reshape(P, 3 * V).T)
        bases = (q.T * 0.03).reshape(P, V, 3)
        basis = BlendshapeBasis(_f32(pts), _f32(bases))
        return AnnotationConvention(cid, name, kind, fps, V, P, scale, lip, upper, _f32(pts), blendshape_basis=basis)
    joints = np.array([[0.0, 0.0, -0.05], [0.0, -0.02, -0.01]])
    w_jaw = 1.0 / (1.0 + np.exp((pts[:, 1] + 0.02) / 0.01))
    weights = np.stack([1.0 - w_jaw, w_jaw], axis=1)
    weights = _f32(weights)
    weights[:, 0] = 1.0 - weights[:, 1]
    rig = LbsRig(_f32(pts), _f32(joints), [-1, 0], weights)
    return AnnotationConvention(cid, name, kind, fps, V, P, scale, lip, upper, _f32(pts), lbs_rig=rig)


@dataclass
class Teacher:
    """Hidden audio-to-motion mapping for one convention."""
    convention: AnnotationConvention
    mix: np.ndarray  # (bands, native_dim)
    gains: dict[int, np.ndarray]  # identity label -> (bands,)

    def features(self, samples: np.ndarray, sample_rate: int) -> np.ndarray:
        return band_features(samples, sample_rate, self.convention.fps)

    def motion(self, samples: np.ndarray, sample_rate: int, identity: int) -> np.ndarray:
        feats = self.features(samples, sample_rate)
        return ((feats * self.gains[identity]) @ self.mix).astype(np.float32)


def band_features(samples: np.ndarray, sample_rate: int, fps: float) -> np.ndarray:
    """Per-frame tone amplitude in each band, lightly smoothed over time."""
    x = np.asarray(samples, dtype=np.float64)
    T = frame_count(x.size, sample_rate, fps)
    feats = np.zeros((T, len(BAND_HZ)))
    d = sample_rate / fps
    for t in range(T):
        lo, hi = int(round(t * d)), min(int(round((t + 1) * d)), x.size)
        seg = x[lo:hi]
        if seg.size == 0:
            continue
        n = np.arange(lo, hi)
        for k, f in enumerate(BAND_HZ):
            phase = 2.0 * np.pi * f * n / sample_rate
            feats[t, k] = 2.0 / seg.size * np.hypot(seg @ np.cos(phase), seg @ np.sin(phase))
    if T >= 3:
        padded = np.concatenate([feats[:1], feats, feats[-1:]])
        feats = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    return feats


def make_teacher(conv: AnnotationConvention, identities: list[int], seed: int) -> Teacher:
    rng = np.random.default_rng([seed, 2000 + conv.id])
    K = len(BAND_HZ)
    if conv.kind == "vertex":
        pts = conv.neutral_template * conv.scale
        mouth = np.array([0.0, -0.05, pts[:, 2].max()])
        near = np.exp(-np.sum((pts - mouth) ** 2, axis=1) / (2 * 0.035 ** 2))
        brow = (pts[:, 1] > 0.02).astype(np.float64)
        mix = np.zeros((K, conv.vertex_count, 3))
        for k in range(K):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            mix[k] = 0.012 * near[:, None] * direction
        mix[K - 1] += 0.004 * brow[:, None] * np.array([0.0, 1.0, 0.0])
        mix = mix.reshape(K, -1) / conv.scale
    elif conv.kind == "blendshape":
        mix = rng.uniform(0.0, 0.8, size=(K, conv.param_count)) * (rng.random((K, conv.param_count)) < 0.6)
    else:
        mix = rng.normal(0.0, 0.04, size=(K, conv.param_count))
        mix[:, 3] = rng.uniform(0.1, 0.3, size=K)  # jaw opening about x
    gains = {i: rng.uniform(0.7, 1.3, size=K) for i in identities}
    return Teacher(conv, mix, gains)


def synth_audio(rng: np.random.Generator, seconds: float, sample_rate: int) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    t = 0
    fade = int(0.008 * sample_rate)
    while t < n:
        length = min(int(rng.uniform(0.1, 0.3) * sample_rate), n - t)
        if rng.random() >= 0.2:
            idx = np.arange(t, t + length)
            seg = np.zeros(length)
            active = rng.choice(len(BAND_HZ), size=rng.integers(1, 3), replace=False)
            for k in active:
                seg += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * BAND_HZ[k] * idx / sample_rate + rng.uniform(0, 2 * np.pi))
            env = np.ones(length)
            r = min(fade, length // 2)
            if r > 0:
                ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, r))
                env[:r] = ramp
                env[-r:] = ramp[::-1]
            out[t : t + length] = seg * env
        t += length
    out += rng.normal(0.0, 0.005, size=n)
    return out.astype(np.float32)


def build_teachers(spec: SynthSpec) -> tuple[list[AnnotationConvention], dict[int, tuple[int, str]], list[Teacher]]:
    convs, identities, teachers = [], {}, []
    label = 0
    for cid, entry in enumerate(spec.conventions):
        conv = make_convention(cid, entry, spec.seed)
        ids = []
        for k in range(spec.identities):
            identities[label] = (cid, f"{conv.name}_spk{k}")
            ids.append(label)
            label += 1
        convs.append(conv)
        teachers.append(make_teacher(conv, ids, spec.seed))
    return convs, identities, teachers


def generate_synthetic(spec: SynthSpec, out_dir, force: bool = False) -> DatasetManifest:
    """Write audio, motion, assets and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    for sub in ("audio", "motion", "assets"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    convs, identities, teachers = build_teachers(spec)
    dup = spec.duplication or [1] * len(convs)
    entries = {c.id: ConventionEntry(c, f"assets/{c.name}.a2fb", int(dup[c.id])) for c in convs}
    records = []
    for conv, teacher in zip(convs, teachers):
        rng = np.random.default_rng([spec.seed, 3000 + conv.id])
        labels = sorted(teacher.gains)
        for k in range(spec.sequences):
            ident = labels[k % len(labels)]
            seq_id = f"{conv.name}_id{ident:02d}_{k:03d}"
            audio = synth_audio(rng, spec.seconds, spec.sample_rate)
            motion = teacher.motion(audio, spec.sample_rate, ident)
            io.write_audio(out / "audio" / f"{seq_id}.a2fa", audio, spec.sample_rate)
            io.write_motion(out / "motion" / f"{seq_id}.a2fm", motion, conv.fps, conv.id)
            records.append(SequenceRecord(seq_id, conv.id, ident, f"audio/{seq_id}.a2fa",
                                          f"motion/{seq_id}.a2fm", "train", entries[conv.id].dup))
    if not records:
        log.warning("synthetic dataset has no sequences")
    manifest = DatasetManifest(out, spec.sample_rate, entries, identities, len(identities), records)
    manifest = split_records(manifest, rng=np.random.default_rng([spec.seed, 4000]))
    write_manifest(manifest)
    return manifest
