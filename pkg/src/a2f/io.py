"""Binary file formats.

* Named-array container (checkpoints use magic ``UTKR``, convention assets
  ``A2FB``)::

      magic[4] | version u32 | meta_len u32 | meta (UTF-8 JSON, sorted keys)
      | n_arrays u32 | n_arrays * (name_len u16 | name | dtype u8 | ndim u8
      | ndim * u32 | payload)

  Arrays are written in sorted-name order so a load/save round trip is
  byte-identical.
* Motion ``A2FM``: magic | version u32 | T u32 | dim u32 | fps f32 |
  convention_id u32 | T*dim f32.
* Audio ``A2FA``: magic | sample_rate u32 | length u64 | length f32; 16-bit
  PCM WAV is also accepted on read.

All integers and floats are little-endian.
"""
from __future__ import annotations

import json
import struct
import wave
from pathlib import Path

import numpy as np

CONTAINER_VERSION = 1
MOTION_VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<i4", 4: "u1"}
_TAGS = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2, ("i", 4): 3, ("u", 1): 4}


class FormatError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> int:
    tag = _TAGS.get((arr.dtype.kind, arr.dtype.itemsize))
    if tag is None:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    return tag


def pack_arrays(magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", CONTAINER_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(raw)
    return b"".join(parts)


def unpack_arrays(blob: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    off = 12
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        tag, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[tag])
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after array directory")
    return arrays, meta


def save_arrays(path, magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(pack_arrays(magic, arrays, meta))


def load_arrays(path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    return unpack_arrays(Path(path).read_bytes(), magic)


# -- motion ---------------------------------------------------------------
_MOTION_HEADER = struct.Struct("<4sIIIfI")


def write_motion(path, frames: np.ndarray, fps: float, convention_id: int) -> None:
    frames = np.asarray(frames, dtype="<f4")
    T, dim = frames.shape
    header = _MOTION_HEADER.pack(b"A2FM", MOTION_VERSION, T, dim, float(fps), convention_id)
    Path(path).write_bytes(header + frames.tobytes())


def read_motion_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_MOTION_HEADER.size)
    if len(raw) < _MOTION_HEADER.size:
        raise FormatError(f"{path}: truncated motion header")
    magic, version, T, dim, fps, conv = _MOTION_HEADER.unpack(raw)
    if magic != b"A2FM":
        raise FormatError(f"{path}: bad motion magic {magic!r}")
    if version != MOTION_VERSION:
        raise FormatError(f"{path}: unsupported motion version {version}")
    return {"frames": T, "dim": dim, "fps": fps, "convention_id": conv}


def read_motion(path) -> tuple[np.ndarray, dict]:
    blob = Path(path).read_bytes()
    head = read_motion_header(path)
    n = head["frames"] * head["dim"]
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=_MOTION_HEADER.size)
    if _MOTION_HEADER.size + 4 * n != len(blob):
        raise FormatError(f"{path}: payload size does not match header")
    return data.reshape(head["frames"], head["dim"]).astype(np.float32), head


# -- audio ----------------------------------------------------------------
_AUDIO_HEADER = struct.Struct("<4sIQ")


def write_audio(path, samples: np.ndarray, sample_rate: int) -> None:
    samples = np.asarray(samples, dtype="<f4")
    Path(path).write_bytes(_AUDIO_HEADER.pack(b"A2FA", sample_rate, samples.size) + samples.tobytes())


def read_audio_header(path) -> dict:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        with wave.open(str(path), "rb") as w:
            return {"sample_rate": w.getframerate(), "length": w.getnframes()}
    with open(path, "rb") as fh:
        raw = fh.read(_AUDIO_HEADER.size)
    if len(raw) < _AUDIO_HEADER.size:
        raise FormatError(f"{path}: truncated audio header")
    magic, sr, n = _AUDIO_HEADER.unpack(raw)
    if magic != b"A2FA":
        raise FormatError(f"{path}: bad audio magic {magic!r}")
    return {"sample_rate": sr, "length": n}


def read_audio(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: only 16-bit PCM WAV is supported")
            raw = w.readframes(w.getnframes())
            pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, w.getnchannels())
            return (pcm.mean(axis=1) / 32768.0).astype(np.float32), w.getframerate()
    head = read_audio_header(path)
    blob = path.read_bytes()
    if _AUDIO_HEADER.size + 4 * head["length"] != len(blob):
        raise FormatError(f"{path}: payload size does not match header")
    data = np.frombuffer(blob, dtype="<f4", count=head["length"], offset=_AUDIO_HEADER.size)
    return data.astype(np.float32), head["sample_rate"]


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
