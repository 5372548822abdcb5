"""Operator entry points: train, eval, ablate, interpret.

Configuration is a plain-text UTF-8 ``key=value`` file merged with
command-line flags (flags win); unknown keys are an error. Every run
echoes its fully resolved configuration into the output directory, and
output directories are never silently overwritten (pass ``--force``).

Exit codes: 0 success, 2 usage/config/data problems, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import model as mdl
from . import training as tr
from .encoders import FramePreprocessSpec
from .exceptions import AffectError, ConfigError, NumericError
from .mfcc import MfccConfig

SEED_ENV_VAR = "S2S_SEED"

ABLATION_VARIANTS = ("SA-CA", "SA-SA", "AudioOnly", "VisionOnly", "CoAttnNoLSTM")

# key -> (type tag, default); booleans are "true"/"false", lr_grid is a
# comma-separated float list.
CONFIG_SCHEMA: dict[str, tuple[str, object]] = {
    # model
    "variant": ("str", "SA-CA"),
    "n_segments": ("int", 10),
    "frames_per_segment": ("int", 4),
    "d_model": ("int", 64),
    "d_hidden": ("int", 64),
    "heads": ("int", 4),
    "d_attn": ("int", 0),
    "depth": ("int", 1),
    "task": ("str", "binary"),
    "interpretable": ("bool", False),
    "standard_block": ("bool", False),
    "visual_patch": ("int", 56),
    "audio_time_patch": ("int", 14),
    "audio_coeff_patch": ("int", 0),
    # audio front end
    "sample_rate": ("int", 16000),
    "frame_length": ("int", 400),
    "hop": ("int", 160),
    "fft_size": ("int", 512),
    "mel_bins": ("int", 40),
    "mfcc_coeffs": ("int", 20),
    "delta_window": ("int", 2),
    # frame preprocessing
    "resize_short_side": ("int", 128),
    "center_crop": ("int", 112),
    # training
    "max_epochs": ("int", 250),
    "patience": ("int", 5),
    "batch_size": ("int", 32),
    "lr_grid": ("floats", (1e-3,)),
    "seed": ("int", None),
    "val_fraction": ("float", 0.2),
    # paths
    "test_manifest": ("str", ""),
    # synthetic data (ablate)
    "synth_mode": ("str", "xor"),
    "synth_tokens": ("int", 2),
    "synth_latent_dim": ("int", 0),
    "synth_noise": ("float", 0.25),
    "synth_train_size": ("int", 2000),
    "synth_test_size": ("int", 500),
}


def _parse_value(key: str, raw: str):
    kind = CONFIG_SCHEMA[key][0]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError("expected true or false")
        if kind == "floats":
            values = tuple(float(x) for x in raw.split(",") if x.strip())
            if not values:
                raise ValueError("empty list")
            return values
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} ({exc})") from exc


def read_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw.strip())
    return values


class RunConfig:
    """Fully resolved configuration: file values overlaid by flags."""

    def __init__(self, file_values: dict, flag_values: dict):
        merged = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
        merged.update(file_values)
        merged.update({k: v for k, v in flag_values.items() if v is not None})
        if merged["seed"] is None:
            env_seed = os.environ.get(SEED_ENV_VAR)
            merged["seed"] = int(env_seed) if env_seed else 0
        self.values = merged

    def model_config(self, variant: str | None = None,
                     interpretable: bool | None = None) -> mdl.ModelConfig:
        v = self.values
        if interpretable is None:
            interpretable = v["interpretable"]
        return mdl.ModelConfig(
            variant=variant or v["variant"], n_segments=v["n_segments"],
            frames_per_segment=v["frames_per_segment"], d_model=v["d_model"],
            d_hidden=v["d_hidden"], heads=v["heads"], d_attn=v["d_attn"],
            depth=v["depth"], task=v["task"], interpretable=interpretable,
            standard_block=v["standard_block"], visual_patch=v["visual_patch"],
            audio_time_patch=v["audio_time_patch"], audio_coeff_patch=v["audio_coeff_patch"])

    def frontend_echo(self) -> dict:
        v = self.values
        return {
            "mfcc": {k: v[k] for k in ("sample_rate", "frame_length", "hop", "fft_size",
                                       "mel_bins", "mfcc_coeffs", "delta_window")},
            "preprocess": {k: v[k] for k in ("resize_short_side", "center_crop")},
        }

    def train_config(self) -> tr.TrainConfig:
        v = self.values
        return tr.TrainConfig(max_epochs=v["max_epochs"], patience=v["patience"],
                              batch_size=v["batch_size"], lr_grid=tuple(v["lr_grid"]),
                              seed=v["seed"], val_fraction=v["val_fraction"])

    def mfcc_config(self) -> MfccConfig:
        v = self.values
        return MfccConfig(sample_rate=v["sample_rate"], frame_length=v["frame_length"],
                          hop=v["hop"], fft_size=v["fft_size"], mel_bins=v["mel_bins"],
                          mfcc_coeffs=v["mfcc_coeffs"], delta_window=v["delta_window"])

    def preprocess_spec(self) -> FramePreprocessSpec:
        v = self.values
        return FramePreprocessSpec(resize_short_side=v["resize_short_side"],
                                   center_crop=v["center_crop"])

    def synthetic_spec(self) -> dt.SyntheticSpec:
        v = self.values
        latent = v["synth_latent_dim"] or v["d_model"]
        if latent != v["d_model"]:
            raise ConfigError(
                f"synth_latent_dim {latent} must equal d_model {v['d_model']} "
                "(precomputed tokens are consumed verbatim)")
        return dt.SyntheticSpec(mode=v["synth_mode"], n_segments=v["n_segments"],
                                tokens_per_modality=v["synth_tokens"], latent_dim=latent,
                                noise=v["synth_noise"], train_size=v["synth_train_size"],
                                test_size=v["synth_test_size"], seed=v["seed"])

    def echo(self, out_dir) -> None:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(repr(x) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def prepare_out_dir(path, force: bool) -> None:
    if os.path.exists(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force to overwrite)")
    os.makedirs(path, exist_ok=True)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_loss_curve(path, history: list[tr.EpochStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_score", "seconds"])
        for e in history:
            writer.writerow([e.epoch, f"{e.train_loss:.8f}", f"{e.val_loss:.8f}",
                             f"{e.val_score:.6f}", f"{e.seconds:.3f}"])


def _grid_summary(outcome: tr.TrainOutcome) -> dict:
    return {
        "best_lr": outcome.best.lr,
        "best_val_score": outcome.best.best_val_score,
        "best_epoch": outcome.best.best_epoch,
        "trials": [
            {"lr": t.lr, "best_val_score": t.best_val_score,
             "epochs_run": t.epochs_run, "stopped_early": t.stopped_early}
            for t in outcome.trials
        ],
    }


def _checkpoint_frontend(ckpt: mdl.Checkpoint) -> tuple[MfccConfig, FramePreprocessSpec]:
    mfcc_cfg = MfccConfig(**ckpt.frontend["mfcc"]) if ckpt.frontend.get("mfcc") else MfccConfig()
    preprocess = (FramePreprocessSpec(**ckpt.frontend["preprocess"])
                  if ckpt.frontend.get("preprocess") else FramePreprocessSpec())
    return mfcc_cfg, preprocess


def _load_manifest_samples(manifest_path, cfg, mfcc_cfg, preprocess):
    records = dt.load_manifest(manifest_path)
    if not records:
        raise ConfigError(f"manifest {manifest_path} is empty")
    base = os.path.dirname(os.path.abspath(manifest_path))
    return records, dt.load_dataset(records, cfg, base, mfcc_cfg, preprocess)


def cmd_train(args) -> int:
    run = RunConfig(read_config_file(args.config),
                    {"variant": args.variant, "seed": args.seed})
    cfg = run.model_config()
    train_cfg = run.train_config()
    prepare_out_dir(args.out, args.force)
    run.echo(args.out)
    records, samples = _load_manifest_samples(args.manifest, cfg, run.mfcc_config(),
                                              run.preprocess_spec())
    geom = dt.manifest_geometry(records, cfg, run.mfcc_config(), run.preprocess_spec())
    test_samples = None
    test_manifest = args.test_manifest or run.values["test_manifest"]
    if test_manifest:
        _, test_samples = _load_manifest_samples(test_manifest, cfg, run.mfcc_config(),
                                                 run.preprocess_spec())
    started = time.perf_counter()
    outcome = tr.grid_search(cfg, geom, samples, train_cfg,
                             test_samples=test_samples, jobs=args.jobs)
    total_seconds = time.perf_counter() - started
    mdl.save_checkpoint(args.out, cfg, geom, outcome.params, run.frontend_echo())
    metrics = {
        "command": "train",
        "variant": cfg.variant,
        "task": cfg.task,
        "seed": train_cfg.seed,
        "n_train_samples": len(samples),
        "grid": _grid_summary(outcome),
        "test": outcome.test_report.to_dict() if outcome.test_report else None,
        "timing": {
            "total_seconds": total_seconds,
            "avg_epoch_seconds": outcome.best.avg_epoch_seconds,
        },
    }
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    _write_loss_curve(os.path.join(args.out, "loss_curve.csv"), outcome.best.history)
    print(f"train: best lr {outcome.best.lr} val score {outcome.best.best_val_score:.4f}"
          + (f", test score {outcome.test_report.score:.4f}" if outcome.test_report else ""))
    return 0


def cmd_eval(args) -> int:
    ckpt = mdl.load_checkpoint(args.checkpoint)
    prepare_out_dir(args.out, args.force)
    mfcc_cfg, preprocess = _checkpoint_frontend(ckpt)
    _, samples = _load_manifest_samples(args.manifest, ckpt.config, mfcc_cfg, preprocess)
    report = tr.evaluate(samples, ckpt.config, ckpt.params)
    payload = {"command": "eval", "checkpoint": os.path.abspath(args.checkpoint),
               "manifest": os.path.abspath(args.manifest), "variant": ckpt.config.variant}
    payload.update(report.to_dict())
    _write_json(os.path.join(args.out, "metrics.json"), payload)
    print(f"eval: score {report.score:.4f} over {report.n_samples} samples")
    return 0


def cmd_ablate(args) -> int:
    run = RunConfig(read_config_file(args.config), {"seed": args.seed})
    prepare_out_dir(args.out, args.force)
    run.echo(args.out)
    data_dir = os.path.join(args.out, "data")
    synth = run.synthetic_spec()
    dataset = dt.generate_synthetic(synth, data_dir)
    train_records = dt.load_manifest(dataset.train_manifest)
    test_records = dt.load_manifest(dataset.test_manifest)
    train_cfg = run.train_config()
    rows = []
    for variant in ABLATION_VARIANTS:
        # interpretable mode is ill-defined for the LSTM-free row; the table
        # compares base variants
        cfg = run.model_config(variant=variant, interpretable=False)
        base = os.path.dirname(os.path.abspath(dataset.train_manifest))
        samples = dt.load_dataset(train_records, cfg, base, run.mfcc_config(),
                                  run.preprocess_spec())
        test_samples = dt.load_dataset(test_records, cfg, base, run.mfcc_config(),
                                       run.preprocess_spec())
        geom = dt.manifest_geometry(train_records, cfg, run.mfcc_config(),
                                    run.preprocess_spec())
        outcome = tr.grid_search(cfg, geom, samples, train_cfg,
                                 test_samples=test_samples, jobs=args.jobs)
        report = outcome.test_report
        modalities = ("audio+vision" if cfg.bimodal
                      else ("audio" if cfg.uses_audio else "vision"))
        row = {
            "variant": variant,
            "modalities": modalities,
            "accuracy": report.accuracy if cfg.task == "binary" else report.score,
            "f1": report.f1 if cfg.task == "binary" else None,
            "best_lr": outcome.best.lr,
            "epochs_run": outcome.best.epochs_run,
            "avg_epoch_seconds": outcome.best.avg_epoch_seconds,
        }
        rows.append(row)
        print(f"ablate: {variant:13s} accuracy {row['accuracy']:.4f} "
              f"({row['epochs_run']} epochs, {row['avg_epoch_seconds']:.2f}s/epoch)")
    _write_json(os.path.join(args.out, "ablation.json"), {"mode": synth.mode, "rows": rows})
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "modalities", "accuracy", "f1", "best_lr",
                         "epochs_run", "avg_epoch_seconds"])
        for row in rows:
            writer.writerow([
                row["variant"], row["modalities"], f"{row['accuracy']:.6f}",
                "" if row["f1"] is None else f"{row['f1']:.6f}",
                row["best_lr"], row["epochs_run"], f"{row['avg_epoch_seconds']:.3f}",
            ])
    return 0


def cmd_interpret(args) -> int:
    ckpt = mdl.load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if not cfg.interpretable:
        raise ConfigError("checkpoint was not trained with interpretable=true")
    prepare_out_dir(args.out, args.force)
    mfcc_cfg, preprocess = _checkpoint_frontend(ckpt)
    _, samples = _load_manifest_samples(args.manifest, cfg, mfcc_cfg, preprocess)
    alphas = np.zeros((len(samples), samples[0].n_segments))
    ids = []
    with ad.no_grad():
        for i, sample in enumerate(samples):
            result = mdl.forward(sample, cfg, ckpt.params)
            alphas[i] = result.alphas.data
            ids.append(sample.sample_id)
    out_path = os.path.join(args.out, "alphas.csv")
    n = alphas.shape[1]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"alpha_{i + 1}" for i in range(n)])
        for sample_id, row in zip(ids, alphas):
            writer.writerow([sample_id] + [f"{a:.8f}" for a in row])
        writer.writerow(["mean"] + [f"{a:.8f}" for a in alphas.mean(axis=0)])
    print(f"interpret: wrote {len(ids)} alpha rows; "
          f"mean mass on last 3 segments {alphas.mean(axis=0)[-3:].sum():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avaffect",
        description="Train and inspect audio-visual co-attention affect models.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="grid-search training with early stopping")
    train.add_argument("--config", required=True)
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--variant", choices=mdl.VARIANTS)
    train.add_argument("--seed", type=int)
    train.add_argument("--test-manifest")
    train.add_argument("--jobs", type=int, default=1)
    train.add_argument("--force", action="store_true")
    train.set_defaults(func=cmd_train)

    evl = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    evl.add_argument("--checkpoint", required=True)
    evl.add_argument("--manifest", required=True)
    evl.add_argument("--out", required=True)
    evl.add_argument("--force", action="store_true")
    evl.set_defaults(func=cmd_eval)

    abl = sub.add_parser("ablate", help="train every variant on shared synthetic data")
    abl.add_argument("--config", required=True)
    abl.add_argument("--out", required=True)
    abl.add_argument("--seed", type=int)
    abl.add_argument("--jobs", type=int, default=1)
    abl.add_argument("--force", action="store_true")
    abl.set_defaults(func=cmd_ablate)

    intp = sub.add_parser("interpret", help="export per-segment attention weights")
    intp.add_argument("--checkpoint", required=True)
    intp.add_argument("--manifest", required=True)
    intp.add_argument("--out", required=True)
    intp.add_argument("--force", action="store_true")
    intp.set_defaults(func=cmd_interpret)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except AffectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
