from __future__ import annotations

import logging
import warnings
from dataclasses import replace

import numpy as np

from ..motion import MotionSequence
from .manifest import AudioClip, DatasetManifest, SequenceRecord

log = logging.getLogger(__name__)

PAPER_SPLIT_RATIOS = (8, 1, 1)
# per-dataset duplication used for D0..D7 of the full benchmark
PAPER_DUPLICATION = (10, 5, 4, 1, 1, 1, 1, 1)


def resample_motion(seq: MotionSequence, target_fps: float) -> MotionSequence:
    """Resample along time.

    Output frame ``j`` sits at source position ``j * fps / target_fps``; an
    integer ratio therefore keeps every k-th frame, anything else blends the
    two neighbouring frames linearly. The first frame is always kept.
    """
    if target_fps <= 0:
        raise ValueError(f"target fps must be positive, got {target_fps}")
    src = float(seq.fps)
    if target_fps == src or seq.num_frames == 0:
        return replace(seq, fps=target_fps, frames=seq.frames.copy())
    ratio = src / target_fps
    T = seq.num_frames
    if float(ratio).is_integer():
        k = int(ratio)
        return replace(seq, fps=target_fps, frames=seq.frames[::k].copy())
    n_out = int(np.floor((T - 1) / ratio + 1e-9)) + 1
    pos = np.arange(n_out) * ratio
    lo = np.minimum(np.floor(pos + 1e-9).astype(np.int64), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)[:, None]
    frac[np.isclose(frac, 0.0, atol=1e-9)] = 0.0
    frames = seq.frames[lo] * (1.0 - frac) + seq.frames[hi] * frac
    return replace(seq, fps=target_fps, frames=frames.astype(seq.frames.dtype))


def split_records(manifest: DatasetManifest, ratios=PAPER_SPLIT_RATIOS, rng: np.random.Generator | None = None,
                  seed: int = 0) -> DatasetManifest:
    """Tag records train/val/test per identity in the given proportions.

    Identities with fewer records than there are splits go entirely to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    total = float(sum(ratios))
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_id.setdefault(r.identity, []).append(i)
    tags = ["train"] * len(manifest.records)
    for ident in sorted(by_id):
        idx = by_id[ident]
        n = len(idx)
        if n < 3:
            warnings.warn(f"identity {ident} has {n} record(s); all assigned to train", stacklevel=2)
            continue
        order = [idx[j] for j in rng.permutation(n)]
        n_val = max(1, int(round(n * ratios[1] / total)))
        n_test = max(1, int(round(n * ratios[2] / total)))
        for j, rec_i in enumerate(order):
            if j < n_val:
                tags[rec_i] = "val"
            elif j < n_val + n_test:
                tags[rec_i] = "test"
    return manifest.with_records([replace(r, split=t) for r, t in zip(manifest.records, tags)])


def apply_duplication(records: list[SequenceRecord], factors: dict[int, int] | None = None,
                      rng: np.random.Generator | None = None) -> list[SequenceRecord]:
    """Epoch sampling list: each record repeated by its dataset's factor, then shuffled.

    Without ``factors`` the per-record ``dup`` field is used.
    """
    out: list[SequenceRecord] = []
    for r in records:
        k = factors.get(r.convention_id, 1) if factors is not None else r.dup
        if int(k) != k or k < 1:
            raise ValueError(f"duplication factor must be a positive integer, got {k}")
        out.extend([r] * int(k))
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def samples_per_frame(sample_rate: int, fps: float) -> float:
    return sample_rate / fps


def align_audio_window(clip: AudioClip, frame_index: int, fps: float) -> np.ndarray:
    """The ``d`` samples belonging to one motion frame; ``d`` must be integral."""
    d = samples_per_frame(clip.sample_rate, fps)
    if not float(d).is_integer():
        raise ValueError(f"{clip.sample_rate} Hz audio does not divide into {fps} fps frames (d={d:g})")
    d = int(d)
    n_frames = clip.samples.size // d
    if not 0 <= frame_index < n_frames:
        raise IndexError(f"frame {frame_index} out of range for {n_frames} frames")
    return clip.samples[frame_index * d : (frame_index + 1) * d]


def frame_count(num_samples: int, sample_rate: int, fps: float) -> int:
    """Motion frames covered by an audio clip: round(duration * fps), halves to even."""
    return int(np.round(num_samples * fps / sample_rate))
