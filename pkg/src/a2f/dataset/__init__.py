from .manifest import (
    DEFAULT_SAMPLE_RATE,
    AudioClip,
    ConventionEntry,
    DatasetManifest,
    ManifestError,
    SequenceRecord,
    load_manifest,
    write_manifest,
)
from .ops import (
    PAPER_DUPLICATION,
    PAPER_SPLIT_RATIOS,
    align_audio_window,
    apply_duplication,
    frame_count,
    resample_motion,
    split_records,
)
from .synth import SynthSpec, band_features, build_teachers, generate_synthetic
