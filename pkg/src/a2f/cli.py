"""Command-line entry point: ``a2f <command> [flags]``.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure
(divergence, non-finite gradients, failed gradient checks).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import metrics as M
from . import training as T
from .dataset import ManifestError, SynthSpec, frame_count, generate_synthetic, load_manifest
from .ipca import PAPER_BATCH_SIZE, PAPER_COMPONENTS, PcaError, load_basis, save_basis
from .model import Checkpoint, ModelConfig, ModelError
from .motion import ConventionError
from .numerics import NonFiniteGradient, no_grad

log = logging.getLogger("a2f")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
RUN_ROOT_ENV = "A2F_RUN_ROOT"
VERTEX_MAGIC = b"A2FV"


class ConfigError(ValueError):
    pass


# -- run configuration --------------------------------------------------------
_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("heads", "num_identities")]
_PLAN_KEYS = [f.name for f in dataclasses.fields(T.TrainPlan) if f.name != "loss"] + ["alpha", "beta"]
_PATH_KEYS = ["manifest", "run_dir", "pca_dir", "checkpoint"]


@dataclass
class RunConfig:
    """Model, plan and path settings; loaded from JSON, then overridden by flags."""
    model: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        for key in d:
            if key not in ("model", "plan", "paths"):
                raise ConfigError(f"unknown config section {key!r} (expected model, plan, paths)")
        cfg = cls(dict(d.get("model", {})), dict(d.get("plan", {})), dict(d.get("paths", {})))
        for section, allowed in (("model", _MODEL_KEYS), ("plan", _PLAN_KEYS), ("paths", _PATH_KEYS)):
            for key in getattr(cfg, section):
                if key not in allowed:
                    raise ConfigError(f"unknown config key {section}.{key}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        return cls.from_dict(data)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def train_plan(self) -> T.TrainPlan:
        p = dict(self.plan)
        loss = T.LossWeights(p.pop("alpha", T.PAPER_ALPHA), p.pop("beta", T.PAPER_BETA))
        return T.TrainPlan(**p, loss=loss)

    def effective(self) -> dict:
        """Full settings after defaults, as echoed into the run directory."""
        model = self.model_config().to_dict()
        model.pop("heads", None)
        model.pop("num_identities", None)
        plan = dataclasses.asdict(self.train_plan())
        plan.update(plan.pop("loss"))
        return {"model": model, "plan": plan, "paths": dict(sorted(self.paths.items()))}


def _csv_floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def _csv_ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    """Flags that override RunConfig fields; ``dest`` encodes section__key."""
    p.add_argument("--config", help="JSON run config with model/plan/paths sections")
    p.add_argument("--manifest", dest="paths__manifest")
    p.add_argument("--run-dir", dest="paths__run_dir", help=f"output directory (default ${RUN_ROOT_ENV}/<run>)")
    p.add_argument("--run", help="run name under the run root")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    g = p.add_argument_group("plan")
    g.add_argument("--epochs", dest="plan__total_epochs", type=int)
    g.add_argument("--warmup-epochs", dest="plan__warmup_epochs", type=int)
    g.add_argument("--lr", dest="plan__lr", type=float)
    g.add_argument("--seed", dest="plan__seed", type=int)
    g.add_argument("--batch-size", dest="plan__batch_size", type=int)
    g.add_argument("--no-pca", dest="plan__use_pca", action="store_const", const=False)
    g.add_argument("--no-warmup", dest="plan__use_warmup", action="store_const", const=False)
    g.add_argument("--L", dest="plan__pca_components", type=int, help="PCA components")
    g.add_argument("--pca-batch", dest="plan__pca_batch", type=int)
    g.add_argument("--alpha", dest="plan__alpha", type=float)
    g.add_argument("--beta", dest="plan__beta", type=float)
    g = p.add_argument_group("model")
    g.add_argument("--decoder-arch", dest="model__decoder_arch", choices=["tcn", "transformer"])
    g.add_argument("--decoder-channels", dest="model__decoder_channels", type=int)
    g.add_argument("--decoder-layers", dest="model__decoder_layers", type=int)
    g.add_argument("--adaptor-position", dest="model__adaptor_position", choices=["pos0", "pos1"])
    g.add_argument("--model-dim", dest="model__model_dim", type=int)
    g.add_argument("--pie-probability", dest="model__pie_probability", type=float)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for key, value in vars(args).items():
        if "__" in key and value is not None:
            section, name = key.split("__", 1)
            getattr(cfg, section)[name] = value
    epochs = cfg.plan.get("total_epochs")
    if epochs is not None and "warmup_epochs" not in cfg.plan:
        cfg.plan["warmup_epochs"] = min(T.TrainPlan.warmup_epochs, epochs)
    try:
        cfg.model_config()
        cfg.train_plan()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid config: {err}") from None
    return cfg


def _run_dir(args, cfg: RunConfig, default_name: str, resume: bool = False) -> Path:
    if cfg.paths.get("run_dir"):
        path = Path(cfg.paths["run_dir"])
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / (args.run or default_name)
    if path.exists() and any(path.iterdir()) and not resume:
        if not args.force:
            raise ConfigError(f"run directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg.paths["run_dir"] = str(path)
    return path


def _echo(path: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    payload = {"command": command, **cfg.effective(), **(extra or {})}
    (path / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _manifest(cfg: RunConfig):
    path = cfg.paths.get("manifest")
    if not path:
        raise ConfigError("a manifest is required (--manifest or paths.manifest)")
    return load_manifest(path)


def _load_pca_dir(pca_dir) -> dict:
    out = {}
    for f in sorted(Path(pca_dir).glob("pca_*.a2fp")):
        out[int(f.stem.split("_")[1])] = load_basis(f)
    if not out:
        raise ConfigError(f"no pca_<convention>.a2fp files in {pca_dir}")
    return out


def _write_reports(path: Path, reports: dict) -> None:
    M.write_report_csv(path, [reports[c] for c in sorted(reports)])


# -- commands -----------------------------------------------------------------
def cmd_synth(args) -> int:
    kinds = [k for k in args.conventions.split(",") if k]
    spec = SynthSpec(kinds, args.ids, args.seqs, args.seconds, args.seed,
                     duplication=_csv_ints(args.duplication) if args.duplication else None)
    if spec.duplication is not None and len(spec.duplication) != len(kinds):
        raise ConfigError("--duplication needs one factor per convention")
    manifest = generate_synthetic(spec, args.out, force=args.force)
    print(f"wrote {len(manifest.records)} sequences to {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def cmd_pca_fit(args) -> int:
    manifest = load_manifest(args.manifest)
    vertex = [c for c, e in manifest.conventions.items() if e.convention.kind == "vertex"]
    if not vertex:
        print("no vertex conventions in the manifest; nothing to fit")
        return EXIT_OK
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    bases = T.fit_bases(manifest, args.L, args.batch, args.seed)
    for cid, basis in sorted(bases.items()):
        if basis.n_components < args.L:
            print(f"convention {cid}: only {basis.n_components} components possible (requested {args.L})")
        save_basis(out / f"pca_{cid}.a2fp", basis)
        print(f"convention {cid}: {basis.n_components} components from {basis.frames_seen} train frames")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.pca_dir:
        cfg.paths["pca_dir"] = args.pca_dir
    manifest = _manifest(cfg)
    run_dir = _run_dir(args, cfg, "train", resume=args.resume)
    pca = _load_pca_dir(cfg.paths["pca_dir"]) if cfg.paths.get("pca_dir") else None
    if not args.resume or not (run_dir / "config.json").exists():
        _echo(run_dir, cfg, "train")
    result = T.train(manifest, cfg.model_config(), cfg.train_plan(), run_dir, resume=args.resume, pca=pca)
    _write_reports(run_dir / "val_metrics.csv", result.val_reports)
    _summary(result.val_reports)
    return EXIT_OK


def _summary(reports: dict) -> None:
    for cid, r in sorted(reports.items()):
        print(f"{r.convention:>14} {r.split}: LVE={r.lve:.4e} MVE={r.mve:.4e} UFVE={r.ufve:.4e} FDD={r.fdd:+.3e}")


def cmd_finetune(args) -> int:
    cfg = _run_config(args)
    manifest = _manifest(cfg)
    ck = Checkpoint.load(args.checkpoint)
    run_dir = _run_dir(args, cfg, "finetune")
    _echo(run_dir, cfg, "finetune", {"checkpoint": args.checkpoint, "convention": args.convention})
    result = T.finetune_seen(ck, manifest, args.convention, cfg.train_plan(), run_dir)
    with open(run_dir / "finetune.csv", "w") as fh:
        fh.write("epoch,train_loss,val_lve\n")
        for r in result.curves:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_lve!r}\n")
    _summary(result.val_reports)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _run_config(args)
    manifest = _manifest(cfg)
    ck = Checkpoint.load(args.checkpoint)
    run_dir = _run_dir(args, cfg, "transfer")
    fractions = _csv_floats(args.fractions)
    _echo(run_dir, cfg, "transfer", {"checkpoint": args.checkpoint, "fractions": fractions,
                                     "scratch_control": args.scratch_control})
    model_cfg = ModelConfig.from_dict({**ck.model.config.to_dict(), **cfg.model})
    models, rows = T.finetune_unseen(ck, manifest, fractions, cfg.train_plan(), args.scratch_control, model_cfg,
                                     run_dir)
    for (fraction, arm), m in models.items():
        m.save(run_dir / f"{arm}_{fraction:g}.ckpt")
    for r in rows:
        print(f"fraction={r.fraction:g} arm={r.arm} sequences={r.sequences} val_lve={r.val_lve:.4e}")
    return EXIT_OK


def cmd_oneshot(args) -> int:
    cfg = _run_config(args)
    manifest = _manifest(cfg)
    ck = Checkpoint.load(args.checkpoint)
    recs = [r for r in manifest.records if r.seq_id == args.sequence]
    if not recs:
        raise ConfigError(f"sequence {args.sequence!r} not in manifest")
    run_dir = _run_dir(args, cfg, "oneshot")
    _echo(run_dir, cfg, "oneshot", {"checkpoint": args.checkpoint, "sequence": args.sequence, "mode": args.mode})
    res = T.one_shot_tune(ck, manifest, recs[0], args.mode, cfg.train_plan())
    res.checkpoint.save(run_dir / "final.ckpt")
    T.write_curves(run_dir / "curves.csv", res.curves)
    with open(run_dir / "oneshot.csv", "w") as fh:
        fh.write("mode,best_val_lve,best_val_lvd,val_loss_before,val_loss_after\n")
        fh.write(f"{args.mode},{res.best_val_lve!r},{res.best_val_lvd!r},{res.initial_val_loss!r},"
                 f"{res.final_val_loss!r}\n")
    print(f"best val LVE={res.best_val_lve:.4e} LVD={res.best_val_lvd:.4e}; "
          f"val loss {res.initial_val_loss:.4e} -> {res.final_val_loss:.4e}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _run_config(args)
    if not cfg.paths.get("manifest"):
        raise ConfigError("a manifest is required")
    load_manifest(cfg.paths["manifest"])
    run_dir = _run_dir(args, cfg, "grid")
    onoff = {"on": (True,), "off": (False,), "both": (True, False)}
    grid = T.GridSpec(tuple(_csv_ints(args.channels)), tuple(args.archs.split(",")), onoff[args.pca],
                      onoff[args.dw], tuple(tuple(_csv_ints(s)) for s in args.datasets.split(";")) if args.datasets
                      else ())
    _echo(run_dir, cfg, "grid", {"grid": dataclasses.asdict(grid), "workers": args.workers})
    rows = T.stability_grid(cfg.paths["manifest"], grid, cfg.model_config(), cfg.train_plan(), args.workers,
                            run_dir / "grid.csv")
    for r in rows:
        print(f"cell {r['cell']}: {r['decoder_arch']} ch={r['channels']} pca={r['pca']} dw={r['dw']} "
              f"val_lve={r['val_lve']:.4e} baseline={r['baseline_lve']:.4e} {r['status']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    try:
        T.check_compatible(ck.model, manifest, manifest.conventions)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    identity = ck.model.config.pivot if args.identity == "pivot" else None
    reports = T.evaluate(ck.model, manifest, args.split, identity=identity)
    if not reports:
        raise ConfigError(f"no {args.split} records to evaluate")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_reports(out, reports)
    if args.std_maps:
        _std_maps(ck, manifest, args.split, Path(args.std_maps))
    _summary(reports)
    return EXIT_OK


def _std_maps(ck: Checkpoint, manifest, split: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cache = T.DataCache(manifest, ck.model.pca, ck.model.config.use_pca)
    for cid, entry in sorted(manifest.conventions.items()):
        conv = entry.convention
        preds, gts = [], []
        for rec in manifest.records_for(split, cid):
            s = cache.get(rec)
            _, v = T.predict(ck.model, s.audio, rec.identity, cid)
            n = min(v.shape[0], s.vertices.shape[0])
            preds.append(v[:n] / conv.scale)
            gts.append(s.vertices[:n] / conv.scale)
        if preds:
            template = conv.neutral_template
            M.write_std_map_csv(out / f"std_{conv.name}_pred.csv", M.motion_std_map(preds, template))
            M.write_std_map_csv(out / f"std_{conv.name}_gt.csv", M.motion_std_map(gts, template))


def cmd_infer(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    model = ck.model
    if args.convention not in model.conventions:
        raise ConfigError(f"convention {args.convention} not in checkpoint (has {sorted(model.conventions)})")
    conv = model.conventions[args.convention]
    samples, sr = io.read_audio(args.audio)
    if sr != model.config.sample_rate:
        raise ConfigError(f"audio sample rate {sr} != model sample rate {model.config.sample_rate}")
    label = model.config.pivot if args.identity == "pivot" else int(args.identity)
    with no_grad():
        out, verts, _ = model.forward(samples[None], [label], args.convention, "infer")
    n = frame_count(samples.size, sr, conv.fps)
    native, verts = _fit_length(out.data[0], n), _fit_length(verts.data[0], n)
    io.write_motion(args.out, native.astype(np.float32), conv.fps, conv.id)
    vpath = Path(args.vertices) if args.vertices else Path(args.out).with_suffix(".a2fv")
    io.save_arrays(vpath, VERTEX_MAGIC, {"vertices": verts.astype(np.float32)},
                   {"convention": conv.name, "fps": conv.fps, "scale": conv.scale, "identity": args.identity})
    print(f"wrote {n} frames to {args.out} and vertices to {vpath}")
    return EXIT_OK


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    # the adaptor can be off by one frame from round(duration * fps); crop or hold the last frame
    if x.shape[0] >= n:
        return x[:n]
    return np.concatenate([x, np.repeat(x[-1:], n - x.shape[0], axis=0)])


def cmd_gradcheck(args) -> int:
    from . import gradsuite as G

    if args.inject_fault:
        with G.inject_fault(args.inject_fault):
            results = G.run_suite(args.seeds)
    else:
        results = G.run_suite(args.seeds)
    print(G.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="a2f", description="Multi-convention audio-to-face training toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-convention corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--conventions", default="vertex,blendshape,skeleton")
    p.add_argument("--ids", type=int, default=4, help="identities per convention")
    p.add_argument("--seqs", type=int, default=40, help="sequences per convention")
    p.add_argument("--seconds", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--duplication", help="comma-separated duplication factor per convention")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pca-fit", help="fit PCA bases for vertex conventions on the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--L", type=int, default=PAPER_COMPONENTS)
    p.add_argument("--batch", type=int, default=PAPER_BATCH_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("train", help="two-stage multi-head training")
    _add_run_flags(p)
    p.add_argument("--pca-dir", help="use bases written by pca-fit instead of fitting")
    p.add_argument("--resume", action="store_true", help="continue from <run-dir>/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on one seen convention")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--convention", type=int, required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("transfer", help="transfer the encoder to unseen conventions")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fractions", default="1")
    p.add_argument("--scratch-control", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("oneshot", help="tune on a single sequence")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="seq_id from the manifest")
    p.add_argument("--mode", choices=T.ONE_SHOT_MODES, default="decoder_only")
    p.set_defaults(func=cmd_oneshot)

    p = sub.add_parser("grid", help="stability grid over decoder settings")
    _add_run_flags(p)
    p.add_argument("--channels", default="64,128,256,512")
    p.add_argument("--archs", default="tcn")
    p.add_argument("--pca", choices=["on", "off", "both"], default="on")
    p.add_argument("--dw", choices=["on", "off", "both"], default="on")
    p.add_argument("--datasets", help="convention-id sets, e.g. '0,1;0'")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="metrics CSV for a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--identity", choices=["true", "pivot"], default="true")
    p.add_argument("--std-maps", help="directory for per-vertex motion std maps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="animate one audio file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help=".a2fa or 16-bit .wav")
    p.add_argument("--identity", default="pivot", help="identity label or 'pivot'")
    p.add_argument("--convention", type=int, required=True)
    p.add_argument("--out", required=True, help="output .a2fm motion file")
    p.add_argument("--vertices", help="vertex dump path (default: <out>.a2fv)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--inject-fault", choices=["conv1d", "gelu", "layer_norm", "linear"],
                   help="corrupt one primitive's backward pass (mutation test)")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (T.TrainingDiverged, NonFiniteGradient, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ManifestError as err:
        print(f"manifest error:\n{err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ModelError, ConventionError, PcaError, FileExistsError, FileNotFoundError, ValueError,
            io.FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
