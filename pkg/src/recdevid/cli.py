"""``recdevid`` command line: synth, extract, train, eval, transfer, ablate, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes a ``resolved_config.json`` next to its outputs; passing
that file back with ``--config`` reproduces the run.
"""
from __future__ import annotations

import os

# deterministic single-threaded BLAS unless the caller decided otherwise
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ThreadPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import ttf  # noqa: E402
from .audio import AudioError, load_wav  # noqa: E402
from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint  # noqa: E402
from .features import FeatureConfigError, FrameSpec, extract_matrix  # noqa: E402
from .model import ConfigError, ModelConfig, ablation_config, build  # noqa: E402
from .synth import GenerationError, SynthCorpusSpec, build_corpus, write_corpus  # noqa: E402
from .train import (PRESETS, TrainConfig, TrainingDivergence, evaluate, train,  # noqa: E402
                    transfer_finetune)

RESOLVED = "resolved_config.json"
SECTIONS = {"command", "synth", "features", "model", "train", "io"}
IO_KEYS = {"corpus", "features", "checkpoint", "out", "split", "threads", "trainable", "groups", "group", "preset"}
TRAINABLE_FLAGS = {"head": "head_only", "mlp+head": "mlp_and_head"}


class UsageError(Exception):
    """Bad flags or configuration: exit code 2."""


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - SECTIONS
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    bad_io = set(cfg.get("io", {})) - IO_KEYS
    if bad_io:
        raise UsageError(f"unknown io keys: {sorted(bad_io)}")
    return cfg


def _pick(flag, cfg: dict, section: str, key: str, default=None):
    """Flag value if given, else the config file's, else the default."""
    if flag is not None:
        return flag
    return cfg.get(section, {}).get(key, default)


def _overrides(cfg: dict, section: str, **flags) -> dict:
    merged = dict(cfg.get(section, {}))
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _read_features(path):
    try:
        x, labels = ttf.read_ttf1(path)
    except (OSError, ttf.TTFFormatError) as exc:
        raise UsageError(f"cannot read features {path}: {exc}") from None
    return x, labels


def _labels_required(labels, path) -> np.ndarray:
    if any(lab is None for lab in labels):
        raise UsageError(f"{path} contains unlabeled samples")
    return np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    fields = _overrides(cfg, "synth", n_devices=args.devices, clips_per_device=args.clips,
                        clip_duration_s=args.duration, sample_rate=args.rate, seed=args.seed,
                        profile_seed=args.profile_seed)
    try:
        spec = SynthCorpusSpec(**fields).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(_pick(args.out, cfg, "io", "out") or "corpus")
    corpus = build_corpus(spec)
    manifest = write_corpus(corpus, out)
    _dump(out / RESOLVED, {"command": "synth", "synth": spec.to_dict(), "io": {"out": str(out)}})
    print(f"wrote {len(corpus.clips)} clips and {manifest}")
    return 0


def _extract_one(task):
    path, spec = task
    clip = load_wav(path)
    return extract_matrix(clip.samples, clip.sample_rate, spec)


def cmd_extract(args, cfg) -> int:
    corpus = Path(_pick(args.corpus, cfg, "io", "corpus") or "")
    out = Path(_pick(args.out, cfg, "io", "out") or (corpus / "features.ttf"))
    threads = int(_pick(args.threads, cfg, "io", "threads", 1))
    try:
        spec = FrameSpec.from_dict(cfg.get("features", {}))
    except (TypeError, FeatureConfigError) as exc:
        raise UsageError(str(exc)) from None
    manifest = corpus / "manifest.csv"
    if not manifest.is_file():
        raise UsageError(f"no manifest.csv in {corpus}")
    with manifest.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "clip_path" not in rows[0]:
        raise UsageError(f"{manifest} has no clip_path column or no rows")
    tasks = [(corpus / r["clip_path"], spec) for r in rows]

    def safe(task):
        try:
            return _extract_one(task), None
        except (OSError, AudioError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(safe, tasks))
    else:
        results = [safe(t) for t in tasks]
    feats, labels, errors = [], [], []
    for row, (mat, err) in zip(rows, results):
        if err is not None:
            errors.append((row["clip_path"], err))
            continue
        feats.append(mat)
        dev = row.get("device_id", "")
        labels.append(int(dev) if dev not in ("", None) else None)
    out.parent.mkdir(parents=True, exist_ok=True)
    x = np.stack(feats) if feats else np.zeros((0, spec.target_frames, spec.n_dims), np.float32)
    ttf.write_ttf1(out, x, labels)
    sidecar = out.with_name(out.name + ".errors.csv")
    if errors:
        with sidecar.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_path", "error"])
            w.writerows(errors)
    elif sidecar.exists():
        sidecar.unlink()
    _dump(out.with_name(out.name + "." + RESOLVED),
          {"command": "extract", "features": spec.to_dict(),
           "io": {"corpus": str(corpus), "out": str(out), "threads": threads}})
    print(f"wrote {len(feats)} features to {out}")
    if errors:
        print(f"{len(errors)} clips failed; see {sidecar}", file=sys.stderr)
        return 1
    return 0


def _model_config(args, cfg, n_classes) -> ModelConfig:
    group = _pick(getattr(args, "group", None), cfg, "io", "group")
    fields = dict(cfg.get("model", {}))
    fields.setdefault("n_classes", n_classes)
    try:
        if group is not None:
            base = ablation_config(int(group)).to_dict()
            base.update({k: v for k, v in fields.items() if k not in ("use_convlstm", "use_bilstm", "use_transformer")})
            return ModelConfig.from_dict(base)
        return ModelConfig.from_dict(fields)
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, cfg, default_preset="paper") -> tuple[str, TrainConfig]:
    name = _pick(getattr(args, "preset", None), cfg, "io", "preset", default_preset)
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fields = PRESETS[name].to_dict()
    fields.update(_overrides(cfg, "train", lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed))
    try:
        return name, TrainConfig.from_dict(fields)
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, cfg) -> int:
    fpath = _pick(args.features, cfg, "io", "features")
    if fpath is None:
        raise UsageError("--features is required")
    x, labels = _read_features(fpath)
    y = _labels_required(labels, fpath)
    preset_name, tcfg = _train_config(args, cfg)
    mcfg = _model_config(args, cfg, int(y.max()) + 1 if len(y) else 2)
    out = Path(_pick(args.out, cfg, "io", "out") or "run")
    model = build(mcfg, tcfg.seed)
    result = train(model, x, y, tcfg, log=(lambda r: print(json.dumps(r), flush=True)) if args.verbose else None)
    tr, va, te = result.splits
    save_checkpoint(model, out, provenance={
        "command": "train", "features": str(fpath), "train_config": tcfg.to_dict(),
        "best_epoch": result.history.best_epoch, "steps": result.steps,
        "splits": {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()}})
    (out / "history.csv").write_text(result.history.to_csv(), encoding="utf-8")
    _dump(out / RESOLVED, {"command": "train", "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                           "io": {"features": str(fpath), "out": str(out), "preset": preset_name}})
    print(f"checkpoint {out}  history {out / 'history.csv'}")
    return 0


def _write_report(report, out: Path, extra: dict) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "report.json", out / "report.csv"
    d = report.to_dict()
    d.update(extra)
    jpath.write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
    cpath.write_text(report.to_csv(), encoding="utf-8")
    return jpath, cpath


def cmd_eval(args, cfg) -> int:
    ckpt = _pick(args.checkpoint, cfg, "io", "checkpoint")
    fpath = _pick(args.features, cfg, "io", "features")
    if ckpt is None or fpath is None:
        raise UsageError("--checkpoint and --features are required")
    split = _pick(args.split, cfg, "io", "split", "all")
    model = load_checkpoint(ckpt)
    x, labels = _read_features(fpath)
    y = _labels_required(labels, fpath)
    if split == "test":
        idx = read_manifest(ckpt).get("provenance", {}).get("splits", {}).get("test")
        if idx is None:
            raise UsageError("checkpoint records no test split; use --split all")
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) and idx.max() >= len(y):
            raise UsageError("recorded test split does not fit this feature file")
        x, y = x[idx], y[idx]
    if len(y) and y.max() >= model.config.n_classes:
        raise UsageError(f"labels reach {y.max()} but the model has {model.config.n_classes} classes")
    threads = int(_pick(args.threads, cfg, "io", "threads", 1))
    report = evaluate(model, x, y, threads=threads)
    out = Path(_pick(args.out, cfg, "io", "out") or (Path(ckpt) / "eval"))
    jpath, cpath = _write_report(report, out, {"checkpoint": str(ckpt), "features": str(fpath), "split": split})
    _dump(out / RESOLVED, {"command": "eval", "io": {"checkpoint": str(ckpt), "features": str(fpath),
                                                     "out": str(out), "split": split, "threads": threads}})
    print(f"accuracy {report.accuracy:.4f}")
    print(jpath)
    print(cpath)
    return 0


def cmd_transfer(args, cfg) -> int:
    ckpt = _pick(args.checkpoint, cfg, "io", "checkpoint")
    fpath = _pick(args.features, cfg, "io", "features")
    if ckpt is None or fpath is None:
        raise UsageError("--checkpoint and --features are required")
    trainable = _pick(args.trainable, cfg, "io", "trainable", "head")
    if trainable not in TRAINABLE_FLAGS:
        raise UsageError(f"--trainable must be one of {sorted(TRAINABLE_FLAGS)}")
    x, labels = _read_features(fpath)
    y = _labels_required(labels, fpath)
    preset_name, tcfg = _train_config(args, cfg, default_preset="transfer")
    n_classes = int(cfg.get("model", {}).get("n_classes", int(y.max()) + 1))
    res = transfer_finetune(ckpt, x, y, n_classes, TRAINABLE_FLAGS[trainable], tcfg,
                            log=(lambda r: print(json.dumps(r), flush=True)) if args.verbose else None)
    out = Path(_pick(args.out, cfg, "io", "out") or "transfer")
    tr, va, te = res.train.splits
    save_checkpoint(res.model, out, provenance={
        "command": "transfer", "pretrained": str(ckpt), "features": str(fpath), "trainable": trainable,
        "train_config": tcfg.to_dict(), "frozen_unchanged": res.frozen_unchanged,
        "splits": {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()}})
    (out / "history.csv").write_text(res.train.history.to_csv(), encoding="utf-8")
    _write_report(res.report, out / "eval", {"trainable": trainable, "frozen_unchanged": res.frozen_unchanged,
                                             "trained_parameters": res.trainable})
    _dump(out / RESOLVED, {"command": "transfer", "train": tcfg.to_dict(), "model": {"n_classes": n_classes},
                           "io": {"checkpoint": str(ckpt), "features": str(fpath), "out": str(out),
                                  "trainable": trainable, "preset": preset_name}})
    print(f"test accuracy {res.report.accuracy:.4f}")
    print(f"frozen parameters bit-identical: {res.frozen_unchanged}")
    return 0 if res.frozen_unchanged else 1


def cmd_ablate(args, cfg) -> int:
    fpath = _pick(args.features, cfg, "io", "features")
    if fpath is None:
        raise UsageError("--features is required")
    x, labels = _read_features(fpath)
    y = _labels_required(labels, fpath)
    groups = _pick(args.groups, cfg, "io", "groups", list(range(1, 8)))
    if any(int(g) not in range(1, 8) for g in groups):
        raise UsageError("groups must lie in 1..7")
    preset_name, tcfg = _train_config(args, cfg)
    out = Path(_pick(args.out, cfg, "io", "out") or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for g in groups:
        args.group = int(g)
        mcfg = _model_config(args, cfg, int(y.max()) + 1)
        model = build(mcfg, tcfg.seed)
        res = train(model, x, y, tcfg)
        te = res.splits[2]
        rep = evaluate(model, x[te], y[te])
        save_checkpoint(model, out / f"group{g}", provenance={"command": "ablate", "group": int(g)})
        rows.append([int(g), mcfg.use_convlstm, mcfg.use_bilstm, mcfg.use_transformer, repr(rep.accuracy),
                     repr(rep.macro["f_score"])])
        print(f"group {g}: accuracy {rep.accuracy:.4f}", flush=True)
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "convlstm", "bilstm", "transformer", "accuracy", "macro_f1"])
        w.writerows(rows)
    _dump(out / RESOLVED, {"command": "ablate", "train": tcfg.to_dict(), "model": cfg.get("model", {}),
                           "io": {"features": str(fpath), "out": str(out), "groups": [int(g) for g in groups],
                                  "preset": preset_name}})
    return 0


def cmd_verify(args, cfg) -> int:
    from .verify import format_report, run_checks
    results = run_checks(args.group_filter or None)
    sys.stdout.write(format_report(results))
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true", help="print one JSON line per epoch")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recdevid", description="Recording-device identification toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-device corpus")
    p.add_argument("--out")
    p.add_argument("--devices", type=int)
    p.add_argument("--clips", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--rate", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--profile-seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="tandem features for every clip in a corpus manifest")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model on a TTF1 feature file")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--group", type=int, choices=range(1, 8), metavar="{1..7}")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--split", choices=["all", "test"])
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="fine-tune a pretrained checkpoint on new classes")
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--trainable", choices=sorted(TRAINABLE_FLAGS))
    _train_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", help="train and evaluate ablation groups")
    p.add_argument("--features")
    p.add_argument("--out")
    p.add_argument("--groups", type=int, nargs="+")
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the built-in check suite")
    p.add_argument("--group", dest="group_filter", action="append",
                   choices=["gradient", "oracle", "shape", "roundtrip"])
    p.set_defaults(func=cmd_verify)

    for p in sub.choices.values():
        p.add_argument("--config", help="JSON config (e.g. a resolved_config.json); flags override it")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args.config)
        if cfg.get("command") not in (None, args.command):
            raise UsageError(f"config is for command {cfg['command']!r}, not {args.command!r}")
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDivergence, GenerationError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
