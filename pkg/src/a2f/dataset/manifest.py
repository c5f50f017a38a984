"""Dataset manifest: a tab-separated text file plus per-convention asset blobs.

Layout (``#`` lines form the header, then one column line, then records)::

    #a2f-manifest   1
    #sample_rate    16000
    #pivot          <label>
    #convention     <id> <name> <kind> <fps> <V> <P> <scale> <assets> <dup>
    #identity       <label> <convention_id> <name>
    seq_id  convention_id  identity  audio  motion  split  dup
    ...

Paths are relative to the manifest's directory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import io
from ..motion import AnnotationConvention, BlendshapeBasis, ConventionError, LbsRig, MotionSequence

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_SAMPLE_RATE = 16000
SPLITS = ("train", "val", "test")
COLUMNS = ("seq_id", "convention_id", "identity", "audio", "motion", "split", "dup")


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid manifest:\n  " + "\n  ".join(self.problems))


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SequenceRecord:
    seq_id: str
    convention_id: int
    identity: int
    audio: str
    motion: str
    split: str = "train"
    dup: int = 1


@dataclass
class ConventionEntry:
    convention: AnnotationConvention
    assets: str
    dup: int = 1


@dataclass
class DatasetManifest:
    root: Path
    sample_rate: int
    conventions: dict[int, ConventionEntry]
    identities: dict[int, tuple[int, str]]  # label -> (convention_id, name)
    pivot: int
    records: list[SequenceRecord] = field(default_factory=list)

    def convention(self, cid: int) -> AnnotationConvention:
        return self.conventions[cid].convention

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    def records_for(self, split: str | None = None, convention_id: int | None = None) -> list[SequenceRecord]:
        return [r for r in self.records
                if (split is None or r.split == split) and (convention_id is None or r.convention_id == convention_id)]

    def duplication_factors(self) -> dict[int, int]:
        return {cid: e.dup for cid, e in self.conventions.items()}

    def load_audio(self, rec: SequenceRecord) -> AudioClip:
        samples, sr = io.read_audio(self.root / rec.audio)
        return AudioClip(samples, sr)

    def load_motion(self, rec: SequenceRecord) -> MotionSequence:
        frames, head = io.read_motion(self.root / rec.motion)
        return MotionSequence(head["convention_id"], head["fps"], frames, rec.identity)

    def with_records(self, records: list[SequenceRecord]) -> "DatasetManifest":
        return replace(self, records=list(records))

    def subset(self, convention_ids) -> "DatasetManifest":
        """Manifest restricted to some conventions; identity labels keep their values."""
        keep = set(convention_ids)
        return replace(
            self,
            conventions={c: e for c, e in self.conventions.items() if c in keep},
            records=[r for r in self.records if r.convention_id in keep],
        )


# -- assets ---------------------------------------------------------------
def convention_arrays(conv: AnnotationConvention) -> dict[str, np.ndarray]:
    arrays = {
        "template": conv.neutral_template.astype(np.float32),
        "lip_mask": np.asarray(conv.lip_mask, dtype=np.int64),
        "upper_mask": np.asarray(conv.upper_face_mask, dtype=np.int64),
    }
    if conv.blendshape_basis is not None:
        arrays["bs.mean"] = conv.blendshape_basis.mean_shape.astype(np.float32)
        arrays["bs.bases"] = conv.blendshape_basis.bases.astype(np.float32)
    if conv.lbs_rig is not None:
        rig = conv.lbs_rig
        arrays["lbs.rest"] = rig.rest_pose.astype(np.float32)
        arrays["lbs.joints"] = rig.joints.astype(np.float32)
        arrays["lbs.parents"] = np.asarray(rig.parents, dtype=np.int64)
        arrays["lbs.weights"] = rig.weights.astype(np.float32)
    return arrays


def convention_from_arrays(arrays: dict[str, np.ndarray], *, id: int, name: str, kind: str, fps: float,
                           vertex_count: int, param_count: int, scale: float) -> AnnotationConvention:
    bs = rig = None
    if "bs.mean" in arrays:
        bs = BlendshapeBasis(arrays["bs.mean"].astype(np.float64), arrays["bs.bases"].astype(np.float64))
    if "lbs.rest" in arrays:
        rig = LbsRig(arrays["lbs.rest"].astype(np.float64), arrays["lbs.joints"].astype(np.float64),
                     [int(p) for p in arrays["lbs.parents"]], arrays["lbs.weights"].astype(np.float64))
    return AnnotationConvention(
        id=id, name=name, kind=kind, fps=fps, vertex_count=vertex_count, param_count=param_count,
        scale=scale, lip_mask=arrays["lip_mask"], upper_face_mask=arrays["upper_mask"],
        neutral_template=arrays["template"].astype(np.float64), blendshape_basis=bs, lbs_rig=rig,
    )


# -- text format ----------------------------------------------------------
def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(manifest: DatasetManifest, path: Path | str | None = None) -> Path:
    """Write the manifest text and every convention's asset blob."""
    path = Path(path) if path is not None else manifest.root / "manifest.tsv"
    root = path.parent
    lines = [f"#a2f-manifest\t{MANIFEST_VERSION}", f"#sample_rate\t{manifest.sample_rate}", f"#pivot\t{manifest.pivot}"]
    for cid in sorted(manifest.conventions):
        e = manifest.conventions[cid]
        c = e.convention
        (root / e.assets).parent.mkdir(parents=True, exist_ok=True)
        io.save_arrays(root / e.assets, b"A2FB", convention_arrays(c))
        lines.append("\t".join(["#convention", str(c.id), c.name, c.kind, _fmt(c.fps), str(c.vertex_count),
                                str(c.param_count), _fmt(c.scale), e.assets, str(e.dup)]))
    for label in sorted(manifest.identities):
        cid, name = manifest.identities[label]
        lines.append(f"#identity\t{label}\t{cid}\t{name}")
    lines.append("\t".join(COLUMNS))
    for r in manifest.records:
        lines.append("\t".join([r.seq_id, str(r.convention_id), str(r.identity), r.audio, r.motion, r.split, str(r.dup)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse(path: Path):
    header: dict = {"conventions": [], "identities": []}
    rows: list[list[str]] = []
    problems: list[str] = []
    seen_columns = False
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0].startswith("#"):
            key = parts[0][1:]
            if key == "convention":
                header["conventions"].append(parts[1:])
            elif key == "identity":
                header["identities"].append(parts[1:])
            elif len(parts) == 2:
                header[key] = parts[1]
            else:
                problems.append(f"line {lineno}: malformed header {line!r}")
        elif not seen_columns:
            if tuple(parts) != COLUMNS:
                problems.append(f"line {lineno}: expected column header {COLUMNS}, got {tuple(parts)}")
            seen_columns = True
        else:
            if len(parts) != len(COLUMNS):
                problems.append(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(parts)}")
                continue
            rows.append(parts)
    return header, header.pop("conventions"), header.pop("identities"), problems, rows


def load_manifest(path, validate_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; all problems are reported together."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise ManifestError([f"manifest not found: {path}"])
    root = path.parent
    header, conv_rows, id_rows, problems, rows = _parse(path)
    if header.get("a2f-manifest") != str(MANIFEST_VERSION):
        problems.append(f"unsupported or missing manifest version {header.get('a2f-manifest')!r}")
    sample_rate = int(header.get("sample_rate", DEFAULT_SAMPLE_RATE))

    conventions: dict[int, ConventionEntry] = {}
    for parts in conv_rows:
        try:
            cid, name, kind, fps, V, P, scale, assets, dup = parts
            arrays, _ = io.load_arrays(root / assets, b"A2FB")
            conv = convention_from_arrays(arrays, id=int(cid), name=name, kind=kind, fps=float(fps),
                                          vertex_count=int(V), param_count=int(P), scale=float(scale))
            if int(dup) < 1:
                raise ConventionError(f"duplication factor must be >= 1, got {dup}")
            conventions[int(cid)] = ConventionEntry(conv, assets, int(dup))
        except (ValueError, OSError, KeyError) as err:
            problems.append(f"convention {parts[:2]}: {err}")

    identities: dict[int, tuple[int, str]] = {}
    for parts in id_rows:
        try:
            label, cid, name = int(parts[0]), int(parts[1]), parts[2]
        except (ValueError, IndexError):
            problems.append(f"identity row malformed: {parts}")
            continue
        if cid not in conventions:
            problems.append(f"identity {label}: unknown convention {cid}")
        if label in identities:
            problems.append(f"identity {label} declared twice")
        identities[label] = (cid, name)
    pivot = int(header.get("pivot", len(identities)))
    if pivot in identities:
        problems.append(f"pivot label {pivot} collides with a dataset identity")

    records: list[SequenceRecord] = []
    for parts in rows:
        try:
            rec = SequenceRecord(parts[0], int(parts[1]), int(parts[2]), parts[3], parts[4], parts[5], int(parts[6]))
        except ValueError as err:
            problems.append(f"record {parts[0]}: {err}")
            continue
        problems.extend(_check_record(rec, conventions, identities, pivot, root, sample_rate, validate_files))
        records.append(rec)
    if problems:
        raise ManifestError(problems)
    return DatasetManifest(root, sample_rate, conventions, identities, pivot, records)


def _check_record(rec, conventions, identities, pivot, root, sample_rate, validate_files) -> list[str]:
    out = []
    tag = f"record {rec.seq_id}"
    if rec.convention_id not in conventions:
        return [f"{tag}: unknown convention {rec.convention_id}"]
    if rec.identity == pivot:
        out.append(f"{tag}: the pivot identity may not label a record")
    elif rec.identity not in identities:
        out.append(f"{tag}: unknown identity {rec.identity}")
    elif identities[rec.identity][0] != rec.convention_id:
        out.append(f"{tag}: identity {rec.identity} belongs to convention {identities[rec.identity][0]}")
    if rec.split not in SPLITS:
        out.append(f"{tag}: split must be one of {SPLITS}, got {rec.split!r}")
    if rec.dup < 1:
        out.append(f"{tag}: duplication factor must be >= 1")
    if not validate_files:
        return out
    conv = conventions[rec.convention_id].convention
    try:
        mh = io.read_motion_header(root / rec.motion)
        ah = io.read_audio_header(root / rec.audio)
    except (OSError, io.FormatError) as err:
        return out + [f"{tag}: {err}"]
    if mh["dim"] != conv.native_dim:
        out.append(f"{tag}: motion dim {mh['dim']} != convention dim {conv.native_dim}")
    if abs(mh["fps"] - conv.fps) > 1e-6:
        out.append(f"{tag}: motion fps {mh['fps']} != convention fps {conv.fps}")
    if mh["convention_id"] != rec.convention_id:
        out.append(f"{tag}: motion file declares convention {mh['convention_id']}")
    if ah["sample_rate"] != sample_rate:
        out.append(f"{tag}: audio sample rate {ah['sample_rate']} != {sample_rate}")
    d = ah["sample_rate"] / conv.fps
    if abs(mh["frames"] * d - ah["length"]) > d:
        out.append(f"{tag}: audio ({ah['length']} samples) and motion ({mh['frames']} frames) "
                   f"differ by more than one frame of audio ({d:g} samples)")
    return out
