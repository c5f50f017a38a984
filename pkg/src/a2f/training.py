"""Two-stage multi-head training, fine-tuning/transfer harnesses and the stability grid."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import metrics as M
from .dataset import DatasetManifest, SequenceRecord, apply_duplication, frame_count
from .ipca import DESK_BATCH_SIZE, DESK_COMPONENTS, PcaBasis, fit_incremental
from .model import Checkpoint, ModelConfig, Talker, head_width, registry_digest
from .motion import AnnotationConvention, native_to_vertices
from .numerics import Adam, AdamState, Tensor, mse, no_grad

log = logging.getLogger(__name__)

PAPER_ALPHA = 0.01
PAPER_BETA = 0.0001
PAPER_EPOCHS = 100
CURVE_COLUMNS = ("epoch", "stage", "train_loss", "val_lve", "val_mve", "val_ufve", "val_fdd")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LossWeights:
    alpha: float = PAPER_ALPHA
    beta: float = PAPER_BETA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainPlan:
    total_epochs: int = PAPER_EPOCHS
    warmup_epochs: int = 10
    lr: float = 1e-4
    seed: int = 0
    batch_size: int = 4
    use_pca: bool = True
    use_warmup: bool = True
    pca_components: int = DESK_COMPONENTS
    pca_batch: int = DESK_BATCH_SIZE
    loss: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds total_epochs ({self.total_epochs})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def stage_of(self, epoch: int) -> str:
        return "warmup" if self.use_warmup and epoch <= self.warmup_epochs else "joint"


# -- loss -------------------------------------------------------------------
def compute_loss(pred_vertices: Tensor, gt_vertices, pred_native: Tensor | None, gt_native, kind: str,
                 weights: LossWeights = LossWeights(), native_is_pca: bool = True) -> Tensor:
    """Vertex MSE plus the weighted native-output term for the head's kind.

    Vertex kinds add ``alpha`` times the PCA-value MSE (only when the head
    predicts PCA values); blendshape and skeleton kinds add ``beta`` times the
    parameter MSE. Every MSE is a mean over all of its elements.
    """
    if kind not in ("vertex", "blendshape", "skeleton"):
        raise ValueError(f"unknown convention kind {kind!r}")
    loss = mse(pred_vertices, gt_vertices)
    if pred_native is None:
        return loss
    if kind == "vertex":
        if native_is_pca and weights.alpha:
            loss = loss + weights.alpha * mse(pred_native, gt_native)
    elif weights.beta:
        loss = loss + weights.beta * mse(pred_native, gt_native)
    return loss


# -- data -------------------------------------------------------------------
@dataclass
class Sample:
    record: SequenceRecord
    audio: np.ndarray
    native: np.ndarray  # (T, dim) stored motion
    vertices: np.ndarray  # (T, V, 3) scaled
    target: np.ndarray  # (T, head width) native target (PCA values for PCA heads)


class DataCache:
    """Loads sequences once and serves aligned training targets."""

    def __init__(self, manifest: DatasetManifest, pca: dict[int, PcaBasis], use_pca: bool):
        self.manifest = manifest
        self.pca = pca
        self.use_pca = use_pca
        self._cache: dict[str, Sample] = {}

    def get(self, rec: SequenceRecord) -> Sample:
        s = self._cache.get(rec.seq_id)
        if s is None:
            conv = self.manifest.convention(rec.convention_id)
            audio = self.manifest.load_audio(rec).samples
            native = self.manifest.load_motion(rec).frames.astype(np.float64)
            verts = native_to_vertices(native, conv)
            if conv.kind == "vertex" and self.use_pca:
                target = self.pca[conv.id].project(native)
            else:
                target = native
            s = Sample(rec, audio, native, verts, target)
            self._cache[rec.seq_id] = s
        return s


def make_batches(records: list[SequenceRecord], batch_size: int, rng: np.random.Generator) -> list[list[SequenceRecord]]:
    """Group an (already shuffled) epoch list into single-convention batches, then shuffle batch order."""
    by_conv: dict[int, list[SequenceRecord]] = {}
    for r in records:
        by_conv.setdefault(r.convention_id, []).append(r)
    batches = []
    for cid in sorted(by_conv):
        rs = by_conv[cid]
        batches.extend(rs[i : i + batch_size] for i in range(0, len(rs), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def collate(samples: list[Sample], sample_rate: int, fps: float):
    """Crop a batch to its shortest clip; returns audio (B, S) and per-sample target arrays."""
    S = min(s.audio.size for s in samples)
    T = min(min(s.native.shape[0] for s in samples), frame_count(S, sample_rate, fps))
    audio = np.stack([s.audio[:S] for s in samples])
    verts = np.stack([s.vertices[:T] for s in samples])
    target = np.stack([s.target[:T] for s in samples])
    labels = np.array([s.record.identity for s in samples])
    return audio, labels, verts, target, T


def _crop_time(t: Tensor, T: int) -> Tensor:
    return t if t.shape[1] == T else t[:, :T]


def fit_bases(manifest: DatasetManifest, n_components: int, batch_size: int, seed: int) -> dict[int, PcaBasis]:
    """One basis per vertex convention, on shuffled train-split frames only."""
    bases = {}
    for cid, entry in sorted(manifest.conventions.items()):
        if entry.convention.kind != "vertex":
            continue
        recs = manifest.records_for("train", cid)
        if not recs:
            continue
        frames = np.concatenate([manifest.load_motion(r).frames.astype(np.float64) for r in recs])
        frames = frames[np.random.default_rng([seed, 77, cid]).permutation(frames.shape[0])]
        L = min(n_components, frames.shape[0], frames.shape[1])
        tag = "train:" + registry_digest({cid: entry.convention}) + f":{len(recs)}"
        bases[cid] = fit_incremental(frames, L, max(batch_size, L), provenance=tag)
    return bases


def build_model(manifest: DatasetManifest, config: ModelConfig, pca: dict[int, PcaBasis], seed: int) -> Talker:
    convs = {cid: e.convention for cid, e in manifest.conventions.items()}
    heads = {cid: head_width(c, pca.get(cid), config.use_pca) for cid, c in convs.items()}
    n_ids = max(manifest.identities, default=-1) + 1
    config = replace(config, heads=heads, num_identities=max(n_ids, manifest.pivot))
    return Talker(config, convs, pca, seed=seed)


# -- evaluation --------------------------------------------------------------
def predict(model: Talker, audio: np.ndarray, label: int, cid: int) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        out, verts, _ = model.forward(audio[None], [label], cid, "infer")
    return out.data[0], verts.data[0]


def evaluate(model: Talker, manifest: DatasetManifest, split: str = "val", cache: DataCache | None = None,
             identity: int | None = None) -> dict[int, M.MetricsReport]:
    """Per-convention metrics in reporting space (training scale undone)."""
    cache = cache or DataCache(manifest, model.pca, model.config.use_pca)
    reports = {}
    for cid, entry in sorted(manifest.conventions.items()):
        conv = entry.convention
        recs = manifest.records_for(split, cid)
        if not recs or cid not in model.config.heads:
            continue
        per_seq = []
        for rec in recs:
            s = cache.get(rec)
            _, verts = predict(model, s.audio, rec.identity if identity is None else identity, cid)
            T = min(verts.shape[0], s.vertices.shape[0])
            per_seq.append(M.evaluate_sequence(verts[:T] / conv.scale, s.vertices[:T] / conv.scale,
                                               conv.lip_mask, conv.upper_face_mask, conv.name, split))
        reports[cid] = M.average_reports(per_seq, conv.name, split)
    return reports


def mean_predictor_reports(manifest: DatasetManifest, split: str = "val",
                           cache: DataCache | None = None) -> dict[int, M.MetricsReport]:
    """Metrics of predicting the mean training face for every frame."""
    cache = cache or DataCache(manifest, {}, False)
    reports = {}
    for cid, entry in sorted(manifest.conventions.items()):
        conv = entry.convention
        train = manifest.records_for("train", cid)
        recs = manifest.records_for(split, cid)
        if not train or not recs:
            continue
        mean_face = np.concatenate([cache.get(r).vertices for r in train]).mean(axis=0)
        per_seq = []
        for rec in recs:
            gt = cache.get(rec).vertices
            pred = np.broadcast_to(mean_face, gt.shape)
            per_seq.append(M.evaluate_sequence(pred / conv.scale, gt / conv.scale, conv.lip_mask,
                                               conv.upper_face_mask, conv.name, split))
        reports[cid] = M.average_reports(per_seq, conv.name, split)
    return reports


def validation_loss(model: Talker, manifest: DatasetManifest, cache: DataCache, weights: LossWeights,
                    split: str = "val") -> float:
    losses = []
    with no_grad():
        for rec in manifest.records_for(split):
            if rec.convention_id not in model.config.heads:
                continue
            s = cache.get(rec)
            conv = manifest.convention(rec.convention_id)
            audio, labels, verts, target, T = collate([s], manifest.sample_rate, conv.fps)
            out, pv, _ = model.forward(audio, labels, rec.convention_id, "infer")
            loss = compute_loss(_crop_time(pv, T), verts, _crop_time(out, T), target, conv.kind, weights,
                                model.config.use_pca)
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


# -- training loop ------------------------------------------------------------
@dataclass
class EpochRow:
    epoch: int
    stage: str
    train_loss: float
    val_lve: float
    val_mve: float
    val_ufve: float
    val_fdd: float

    def cells(self) -> list[str]:
        return [str(self.epoch), self.stage] + [repr(float(getattr(self, k))) for k in CURVE_COLUMNS[2:]]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curves: list[EpochRow]
    val_reports: dict[int, M.MetricsReport]


def write_curves(path, rows: Iterable[EpochRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow(r.cells())


def read_curves(path) -> list[EpochRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRow(int(r["epoch"]), r["stage"], *(float(r[k]) for k in CURVE_COLUMNS[2:])) for r in rows]


def _optimizer_arrays(state: AdamState) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for name in sorted(state.m):
        arrays[f"optim.m.{name}"] = state.m[name]
        arrays[f"optim.v.{name}"] = state.v[name]
    return arrays, {"adam_step": state.step, "lr": state.lr}


def _restore_optimizer(ck: Checkpoint, opt: Adam) -> None:
    st = opt.state
    st.step = int(ck.extra_meta.get("adam_step", 0))
    for key, arr in ck.extra_arrays.items():
        _, which, name = key.split(".", 2)
        (st.m if which == "m" else st.v)[name] = arr.copy()


def run_training(
    model: Talker,
    manifest: DatasetManifest,
    plan: TrainPlan,
    *,
    train_records: list[SequenceRecord] | None = None,
    frozen: Callable[[str, str], bool] | None = None,
    run_dir: Path | None = None,
    start_epoch: int = 1,
    optimizer: Adam | None = None,
    curves: list[EpochRow] | None = None,
    on_epoch: Callable[[int, EpochRow, Talker], None] | None = None,
    eval_metrics: bool = True,
) -> TrainResult:
    """Core loop shared by every harness.

    ``frozen(name, stage)`` decides which parameters stay fixed in a stage;
    the default freezes the audio encoder during warm-up only.
    """
    if frozen is None:
        def frozen(name, stage):
            return stage == "warmup" and name.startswith("encoder.")
    records = train_records if train_records is not None else manifest.records_for("train")
    if not records:
        raise ValueError("no training records")
    cache = DataCache(manifest, model.pca, model.config.use_pca)
    opt = optimizer or Adam(model.params, lr=plan.lr)
    opt.params = model.params
    curves = list(curves or [])
    factors = manifest.duplication_factors()
    sr = manifest.sample_rate
    stage = plan.stage_of(start_epoch)
    for epoch in range(start_epoch, plan.total_epochs + 1):
        stage = plan.stage_of(epoch)
        trainable = {n for n in model.params if not frozen(n, stage)}
        for n, p in model.params.items():
            p.requires_grad = n in trainable
        order_rng = np.random.default_rng([plan.seed, epoch, 0])
        pie_rng = np.random.default_rng([plan.seed, epoch, 1])
        epoch_list = apply_duplication(records, factors, order_rng)
        losses = []
        for step, batch in enumerate(make_batches(epoch_list, plan.batch_size, order_rng)):
            cid = batch[0].convention_id
            conv = manifest.convention(cid)
            audio, labels, verts, target, T = collate([cache.get(r) for r in batch], sr, conv.fps)
            out, pv, _ = model.forward(audio, labels, cid, "train", pie_rng)
            loss = compute_loss(_crop_time(pv, T), verts, _crop_time(out, T), target, conv.kind, plan.loss,
                                model.config.use_pca)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step} (convention {conv.name})")
            opt.zero_grad()
            loss.backward()
            opt.step(trainable)
            losses.append(value)
        for p in model.params.values():
            p.requires_grad = True
        row = EpochRow(epoch, stage, float(np.mean(losses)), *([float("nan")] * 4))
        if eval_metrics and manifest.records_for("val"):
            reps = evaluate(model, manifest, "val", cache)
            if reps:
                row = EpochRow(epoch, stage, row.train_loss,
                               *(float(np.mean([getattr(r, k) for r in reps.values()])) for k in ("lve", "mve", "ufve", "fdd")))
        curves.append(row)
        log.info("epoch %d [%s] loss=%.4g val_lve=%.4g", epoch, stage, row.train_loss, row.val_lve)
        if on_epoch is not None:
            on_epoch(epoch, row, model)
        if run_dir is not None and (epoch % plan.checkpoint_every == 0 or epoch == plan.total_epochs):
            arrays, meta = _optimizer_arrays(opt.state)
            Checkpoint(model, stage, epoch, arrays, meta).save(Path(run_dir) / "last.ckpt")
            write_curves(Path(run_dir) / "curves.csv", curves)
    final = Checkpoint(model, stage, plan.total_epochs)
    reports = evaluate(model, manifest, "val", cache) if manifest.records_for("val") else {}
    return TrainResult(final, curves, reports)


def train(manifest: DatasetManifest, config: ModelConfig, plan: TrainPlan, run_dir: Path | None = None,
          resume: bool = False, pca: dict[int, PcaBasis] | None = None,
          on_epoch: Callable[[int, EpochRow, Talker], None] | None = None) -> TrainResult:
    """Warm-up + joint training; PCA bases are fitted on the train split unless given."""
    if not manifest.records_for("train"):
        raise ValueError("manifest has no train split records")
    config = replace(config, use_pca=plan.use_pca)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    if resume and run_dir is not None and (run_dir / "last.ckpt").exists():
        ck = Checkpoint.load(run_dir / "last.ckpt")
        model = ck.model
        opt = Adam(model.params, lr=plan.lr)
        _restore_optimizer(ck, opt)
        curves = read_curves(run_dir / "curves.csv") if (run_dir / "curves.csv").exists() else []
        curves = [r for r in curves if r.epoch <= ck.epoch]
        result = run_training(model, manifest, plan, run_dir=run_dir, start_epoch=ck.epoch + 1,
                              optimizer=opt, curves=curves, on_epoch=on_epoch)
    else:
        if not plan.use_pca:
            pca = {}
        elif pca is None:
            pca = fit_bases(manifest, plan.pca_components, plan.pca_batch, plan.seed)
        model = build_model(manifest, config, pca, plan.seed)
        result = run_training(model, manifest, plan, run_dir=run_dir, on_epoch=on_epoch)
    if run_dir is not None:
        result.checkpoint.save(run_dir / "final.ckpt")
        write_curves(run_dir / "curves.csv", result.curves)
    return result


def check_compatible(model: Talker, manifest: DatasetManifest, convention_ids: Iterable[int]) -> None:
    for cid in convention_ids:
        if cid not in model.conventions:
            raise ValueError(f"convention {cid} is not part of the checkpoint")
        if registry_digest({cid: model.conventions[cid]}) != registry_digest({cid: manifest.convention(cid)}):
            raise ValueError(f"convention {cid} assets differ between checkpoint and manifest; retrain or convert")


def finetune_seen(checkpoint: Checkpoint, manifest: DatasetManifest, convention_id: int, plan: TrainPlan,
                  run_dir: Path | None = None) -> TrainResult:
    """Continue training every weight on one dataset the model already has a head for."""
    if convention_id not in checkpoint.model.config.heads:
        raise ValueError(f"unknown convention {convention_id} for this checkpoint")
    check_compatible(checkpoint.model, manifest, [convention_id])
    model = checkpoint.model.clone()
    sub = manifest.subset([convention_id])
    plan = replace(plan, use_warmup=False)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    result = run_training(model, sub, plan, run_dir=run_dir, frozen=lambda n, s: False)
    if run_dir is not None:
        result.checkpoint.save(Path(run_dir) / "final.ckpt")
        write_curves(Path(run_dir) / "curves.csv", result.curves)
    return result


def nested_subset(records: list[SequenceRecord], fraction: float, seed: int) -> list[SequenceRecord]:
    """First ceil(fraction * n) records of one fixed shuffle, so smaller fractions nest inside larger ones."""
    if not 0 < fraction <= 1:
        raise ValueError(f"data fraction must lie in (0, 1], got {fraction}")
    order = np.random.default_rng([seed, 55]).permutation(len(records))
    n = max(1, int(math.ceil(fraction * len(records) - 1e-9)))
    return [records[i] for i in sorted(order[:n])]


@dataclass
class TransferRow:
    fraction: float
    arm: str
    sequences: int
    val_lve: float


def finetune_unseen(checkpoint: Checkpoint, manifest: DatasetManifest, fractions: Iterable[float], plan: TrainPlan,
                    scratch_control: bool = False, config: ModelConfig | None = None,
                    run_dir: Path | None = None) -> tuple[dict[tuple[float, str], Checkpoint], list[TransferRow]]:
    """Transfer the audio encoder to conventions the checkpoint has never seen.

    For each fraction, the pretrained arm copies the encoder and reinitialises
    decoder, heads and identity table; the optional scratch arm starts from a
    fresh model with the same seed.
    """
    src = checkpoint.model
    known = {c.name for c in src.conventions.values()}
    clash = [c.name for c in (e.convention for e in manifest.conventions.values()) if c.name in known]
    if clash:
        raise ValueError(f"convention(s) {clash} already exist in the checkpoint; use finetune_seen")
    base_cfg = config or src.config
    train_all = manifest.records_for("train")
    pca = fit_bases(manifest, plan.pca_components, plan.pca_batch, plan.seed) if plan.use_pca else {}
    out_models, rows = {}, []
    arms = ["pretrained"] + (["scratch"] if scratch_control else [])
    for fraction in fractions:
        subset = nested_subset(train_all, fraction, plan.seed)
        for arm in arms:
            model = build_model(manifest, replace(base_cfg, use_pca=plan.use_pca), pca, plan.seed)
            if arm == "pretrained":
                for name in model.encoder_names():
                    if model.params[name].shape != src.params[name].shape:
                        raise ValueError(f"encoder parameter {name} has incompatible shape")
                    model.params[name].data = src.params[name].data.copy()
            result = run_training(model, manifest, plan, train_records=subset)
            lve = float(np.mean([r.lve for r in result.val_reports.values()])) if result.val_reports else float("nan")
            rows.append(TransferRow(float(fraction), arm, len(subset), lve))
            out_models[(float(fraction), arm)] = result.checkpoint
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        write_transfer_csv(Path(run_dir) / "transfer.csv", rows)
    return out_models, rows


def write_transfer_csv(path, rows: list[TransferRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "arm", "sequences", "val_lve"])
        for r in rows:
            w.writerow([repr(r.fraction), r.arm, r.sequences, repr(r.val_lve)])


ONE_SHOT_MODES = ("all_but_frontend", "decoder_only")


@dataclass
class OneShotResult:
    checkpoint: Checkpoint
    best_val_lve: float
    best_val_lvd: float
    initial_val_loss: float
    final_val_loss: float
    curves: list[EpochRow]


def one_shot_tune(checkpoint: Checkpoint, manifest: DatasetManifest, record: SequenceRecord, mode: str,
                  plan: TrainPlan) -> OneShotResult:
    """Tune on a single sequence; validate on the other sequences of the same identity.

    ``decoder_only`` freezes the whole audio encoder; ``all_but_frontend``
    freezes only its convolutional front-end.
    """
    if mode not in ONE_SHOT_MODES:
        raise ValueError(f"mode must be one of {ONE_SHOT_MODES}")
    model = checkpoint.model.clone()
    check_compatible(model, manifest, [record.convention_id])
    val = [replace(r, split="val") for r in manifest.records
           if r.identity == record.identity and r.seq_id != record.seq_id]
    if not val:
        raise ValueError(f"identity {record.identity} has no other sequences to validate on")
    train_rec = replace(record, split="train")
    sub = manifest.subset([record.convention_id]).with_records([train_rec] + val)
    cache = DataCache(sub, model.pca, model.config.use_pca)
    if cache.get(train_rec).native.shape[0] == 0:
        raise ValueError("one-shot sequence is empty")
    if mode == "decoder_only":
        frozen = lambda n, s: n.startswith("encoder.")  # noqa: E731
    else:
        frozen = lambda n, s: n.startswith("encoder.tcn.")  # noqa: E731
    before = validation_loss(model, sub, cache, plan.loss)
    # the untuned weights stay a candidate, so tuning never ends worse than it started
    best = {"loss": before, "state": {n: p.data.copy() for n, p in model.params.items()}}

    def keep_best(epoch, row, _model):
        loss = validation_loss(model, sub, cache, plan.loss)
        if loss < best["loss"]:
            best["loss"] = loss
            best["state"] = {n: p.data.copy() for n, p in model.params.items()}

    plan = replace(plan, use_warmup=False, batch_size=1)
    result = run_training(model, sub, plan, train_records=[train_rec], frozen=frozen, on_epoch=keep_best,
                          eval_metrics=False)
    for n, arr in best["state"].items():
        model.params[n].data = arr
    reps = evaluate(model, sub, "val", cache)
    lve = float(np.mean([r.lve for r in reps.values()]))
    lvd = float(np.mean([r.lvd for r in reps.values()]))
    return OneShotResult(Checkpoint(model, "joint", plan.total_epochs), lve, lvd, before, best["loss"],
                         result.curves)


# -- stability grid ----------------------------------------------------------
GRID_COLUMNS = ("cell", "datasets", "decoder_arch", "channels", "pca", "dw", "val_lve", "baseline_lve",
                "status")


@dataclass
class GridSpec:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    architectures: tuple[str, ...] = ("tcn",)
    pca: tuple[bool, ...] = (True,)
    dw: tuple[bool, ...] = (True,)
    dataset_sets: tuple[tuple[int, ...], ...] = ()  # empty: all conventions together

    def cells(self, all_ids: tuple[int, ...]) -> list[dict]:
        sets = self.dataset_sets or (all_ids,)
        out = []
        for ds in sets:
            for arch in self.architectures:
                for ch in self.channels:
                    for p in self.pca:
                        for d in self.dw:
                            out.append({"datasets": tuple(ds), "decoder_arch": arch, "channels": int(ch),
                                        "pca": bool(p), "dw": bool(d)})
        return out


def _run_cell(args) -> dict:
    index, cell, manifest_path, config_dict, plan_dict = args
    from .dataset import load_manifest

    manifest = load_manifest(manifest_path).subset(cell["datasets"])
    config = ModelConfig.from_dict(config_dict)
    config = replace(config, decoder_arch=cell["decoder_arch"], decoder_channels=cell["channels"])
    plan = TrainPlan(**plan_dict)
    plan = replace(plan, use_pca=cell["pca"], use_warmup=cell["dw"], seed=int(np.random.SeedSequence(
        [plan.seed, index]).generate_state(1)[0]))
    baseline = mean_predictor_reports(manifest)
    base_lve = float(np.mean([r.lve for r in baseline.values()]))
    row = {"cell": index, "datasets": "+".join(str(d) for d in cell["datasets"]),
           "decoder_arch": cell["decoder_arch"], "channels": cell["channels"], "pca": int(cell["pca"]),
           "dw": int(cell["dw"]), "baseline_lve": base_lve}
    try:
        result = train(manifest, config, plan)
        lve = float(np.mean([r.lve for r in result.val_reports.values()]))
    except (TrainingDiverged, FloatingPointError) as err:
        log.warning("grid cell %d diverged: %s", index, err)
        return {**row, "val_lve": float("nan"), "status": "divergent"}
    if not math.isfinite(lve) or lve > 10.0 * base_lve:
        status = "divergent"
    elif lve < base_lve:
        status = "converged"
    else:
        status = "stalled"
    return {**row, "val_lve": lve, "status": status}


def stability_grid(manifest_path, grid: GridSpec, config: ModelConfig, plan: TrainPlan, workers: int = 1,
                   out_csv: Path | None = None) -> list[dict]:
    """One training run per grid cell; a failing cell is recorded, never raised."""
    from .dataset import load_manifest

    ids = tuple(sorted(load_manifest(manifest_path).conventions))
    cells = grid.cells(ids)
    plan_dict = asdict(plan)
    jobs = [(i, c, str(manifest_path), config.to_dict(), plan_dict) for i, c in enumerate(cells)]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(workers) as pool:
            rows = pool.map(_run_cell, jobs)
    else:
        rows = [_run_cell(j) for j in jobs]
    rows.sort(key=lambda r: r["cell"])
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
