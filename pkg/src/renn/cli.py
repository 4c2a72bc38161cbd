"""Command-line interface: ``renn gen | train | eval | infer | trace``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ecgsynth, pipeline
from .errors import ConfigError, RennError
from .fcn import FcnConfig, load_weights, save_weights

log = logging.getLogger("renn")

F_WEIGHTS = "f.weights"
G_WEIGHTS = "g.weights"
MODEL_META = "model.meta"
TRACE_HEADER = ["t", "x", "f", "r", "o", "label", "detected"]


class UsageFailure(Exception):
    """Bad flags or config values; maps to exit code 2."""


# key -> parser; keys mirror flag names (underscores or dashes both accepted)
CONFIG_KEYS = {
    "count": int, "seed": int, "noise_level": int, "train_fraction": float,
    "duration_s": float, "fs": int, "rr_jitter_s": float,
    "mean_rr_min_s": float, "mean_rr_max_s": float,
    "amplitude_min_mv": float, "amplitude_max_mv": float,
    "white_sigma_mv": float, "baseline_amp_mv": float, "baseline_freq_hz": float,
    "ac_amp_mv": float, "ac_freq_hz": float, "dropout_prob": float,
    "weak_beat_prob": float, "artifact_rate_hz": float, "artifact_amp_mv": float,
    "channels": int, "epochs": int, "stage": str, "lr0": float, "decay_rate": float,
    "decay_every_steps": int, "w_pos": str, "tolerance_ms": float, "mode": str,
}
NOISE_KEYS = ("white_sigma_mv", "baseline_amp_mv", "baseline_freq_hz", "ac_amp_mv",
              "ac_freq_hz", "dropout_prob", "weak_beat_prob", "artifact_rate_hz",
              "artifact_amp_mv")


def read_config(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageFailure(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageFailure(f"{path}:{lineno}: expected key=value")
        if key not in CONFIG_KEYS:
            raise UsageFailure(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value.strip())
        except ValueError:
            raise UsageFailure(f"{path}:{lineno}: bad value for {key}: {value.strip()!r}") from None
    return values


def _settings(args, defaults: dict) -> dict:
    """Defaults < config file < explicit flags < RENN_SEED."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    env_seed = os.environ.get("RENN_SEED")
    if env_seed is not None and "seed" in merged:
        try:
            merged["seed"] = int(env_seed)
        except ValueError:
            raise UsageFailure(f"RENN_SEED must be an integer, got {env_seed!r}") from None
    return merged


# -- gen ------------------------------------------------------------------------

GEN_DEFAULTS = {
    "count": 500, "seed": 0, "noise_level": 1, "train_fraction": 0.8, "duration_s": 12.0,
    "fs": 125, "rr_jitter_s": 0.02, "mean_rr_min_s": 0.6, "mean_rr_max_s": 1.0,
    "amplitude_min_mv": 0.2, "amplitude_max_mv": 1.0,
    **{k: None for k in NOISE_KEYS},
}


def cmd_gen(args) -> int:
    s = _settings(args, GEN_DEFAULTS)
    if s["count"] < 1:
        raise UsageFailure("--count must be >= 1")
    if s["noise_level"] not in ecgsynth.NOISE_LEVELS:
        raise UsageFailure(f"--noise-level must be one of {sorted(ecgsynth.NOISE_LEVELS)}")
    noise = replace(ecgsynth.NOISE_LEVELS[s["noise_level"]],
                    **{k: s[k] for k in NOISE_KEYS if s[k] is not None})
    try:
        records, splits = ecgsynth.make_dataset(
            s["count"], s["seed"], noise, s["train_fraction"], duration_s=s["duration_s"],
            fs=s["fs"], mean_rr_range=(s["mean_rr_min_s"], s["mean_rr_max_s"]),
            rr_jitter_s=s["rr_jitter_s"],
            amplitude_range=(s["amplitude_min_mv"], s["amplitude_max_mv"]))
    except ConfigError as exc:
        raise UsageFailure(str(exc)) from None
    manifest = ecgsynth.write_dataset(records, splits, args.out)
    n_train = len(manifest.split("train"))
    print(f"wrote {len(records)} records to {args.out} ({n_train} train, "
          f"{len(records) - n_train} test, fs={manifest.fs})")
    return 0


# -- train ----------------------------------------------------------------------

TRAIN_DEFAULTS = {"channels": 8, "epochs": 20, "stage": "both", "seed": 0, "lr0": 1e-4,
                  "decay_rate": 0.99, "decay_every_steps": 1000, "w_pos": "auto"}


def _train_config(s: dict) -> pipeline.TrainConfig:
    w_pos = s["w_pos"]
    if w_pos != "auto":
        try:
            w_pos = float(w_pos)
        except ValueError:
            raise UsageFailure(f"w_pos must be a number or 'auto', got {w_pos!r}") from None
    cfg = pipeline.TrainConfig(channels=s["channels"], epochs=s["epochs"], lr0=s["lr0"],
                               decay_rate=s["decay_rate"],
                               decay_every_steps=s["decay_every_steps"], w_pos=w_pos,
                               seed=s["seed"])
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageFailure(str(exc)) from None
    return cfg


def write_model_meta(directory: Path, fs: int, channels: int) -> None:
    (directory / MODEL_META).write_text(f"fs={fs}\nchannels={channels}\n", encoding="utf-8",
                                        newline="\n")


def read_model_meta(directory: Path) -> dict:
    path = directory / MODEL_META
    if not path.exists():
        raise RennError(f"{path} not found; train a model first")
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        if key.strip():
            meta[key.strip()] = int(value)
    return meta


def load_models(directory, need_g: bool = True):
    directory = Path(directory)
    meta = read_model_meta(directory)
    c = meta["channels"]
    if not (directory / F_WEIGHTS).exists():
        raise RennError(f"{directory / F_WEIGHTS} not found")
    f = load_weights(directory / F_WEIGHTS, FcnConfig(1, c))
    g = None
    if need_g:
        if not (directory / G_WEIGHTS).exists():
            raise RennError(f"{directory / G_WEIGHTS} not found; run train --stage 2")
        g = load_weights(directory / G_WEIGHTS, FcnConfig(3, c))
    return f, g, meta


def write_loss_csv(path: Path, history: pipeline.LossHistory) -> None:
    lines = ["epoch,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(history.epoch_loss, start=1)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def cmd_train(args) -> int:
    s = _settings(args, TRAIN_DEFAULTS)
    if s["stage"] not in ("1", "2", "both"):
        raise UsageFailure("--stage must be 1, 2 or both")
    cfg = _train_config(s)
    records, manifest = ecgsynth.read_dataset(args.data, split="train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if s["stage"] in ("1", "both"):
        f, hist = pipeline.train_stage1(records, cfg)
        save_weights(f, out / F_WEIGHTS)
        write_loss_csv(out / "loss_stage1.csv", hist)
        write_model_meta(out, manifest.fs, cfg.channels)
        print(f"stage 1: {len(records)} records, {cfg.epochs} epochs, "
              f"final loss {hist.epoch_loss[-1]:.6g}")
    if s["stage"] in ("2", "both"):
        if not (out / F_WEIGHTS).exists():
            raise RennError(f"stage 2 needs {out / F_WEIGHTS}; run --stage 1 first")
        meta = read_model_meta(out)
        if meta["channels"] != cfg.channels:
            raise RennError(f"{out / F_WEIGHTS} has {meta['channels']} channels, "
                            f"--channels is {cfg.channels}")
        f = load_weights(out / F_WEIGHTS, FcnConfig(1, cfg.channels))
        g, hist = pipeline.train_stage2(records, f, cfg)
        save_weights(g, out / G_WEIGHTS)
        write_loss_csv(out / "loss_stage2.csv", hist)
        print(f"stage 2: {len(records)} records, {cfg.epochs} epochs, "
              f"final loss {hist.epoch_loss[-1]:.6g}")
    return 0


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    s = _settings(args, {"mode": None, "tolerance_ms": 16.0})
    if s["mode"] not in (None, "local", "global"):
        raise UsageFailure("--mode must be local or global")
    modes = [s["mode"]] if s["mode"] else ["local", "global"]
    f, g, meta = load_models(args.models, need_g="global" in modes)
    records, manifest = ecgsynth.read_dataset(args.data, split="test", expected_fs=meta["fs"])
    tol, rounded = pipeline.tolerance_ms_to_samples(s["tolerance_ms"], manifest.fs)
    if rounded:
        log.warning("tolerance %.6g ms is not a whole number of samples at %d Hz; using %d",
                    s["tolerance_ms"], manifest.fs, tol)
    rows = []
    for mode in modes:
        if mode == "local":
            report = pipeline.evaluate_records(records, lambda r: pipeline.infer_local(f, r), tol)
        else:
            report = pipeline.evaluate_records(
                records, lambda r: pipeline.infer(f, g, r, meta["fs"]).detected, tol)
        rows.append(pipeline.TableRow(mode, meta["channels"], report))
    table = pipeline.format_table(rows)
    sys.stdout.write(table)
    out = Path(args.out) if args.out else Path(args.models) / "eval.csv"
    out.write_text(table, encoding="utf-8", newline="\n")
    return 0


# -- infer / trace --------------------------------------------------------------

def _trace_for(args) -> pipeline.InferenceTrace:
    f, g, meta = load_models(args.models)
    record = ecgsynth.read_record(args.record, meta["fs"])
    return pipeline.infer(f, g, record, meta["fs"])


def trace_csv(trace: pipeline.InferenceTrace) -> str:
    n = len(trace.x)
    label = np.zeros(n, dtype=int)
    if trace.labels is not None:
        label[trace.labels] = 1
    detected = np.zeros(n, dtype=int)
    detected[trace.detected] = 1
    lines = [",".join(TRACE_HEADER)]
    for t in range(n):
        lines.append(f"{t},{trace.x[t]:.17g},{trace.f_pos[t]:.17g},{trace.r[t]:.17g},"
                     f"{trace.o_pos[t]:.17g},{label[t]},{detected[t]}")
    return "\n".join(lines) + "\n"


def cmd_trace(args) -> int:
    trace = _trace_for(args)
    text = trace_csv(trace)
    if text.count("\n") != len(trace.x) + 1:
        raise RennError("trace row count does not match the record length")
    Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    print(f"wrote {len(trace.x)} rows to {args.out}; {len(trace.detected)} peaks detected")
    return 0


def cmd_infer(args) -> int:
    trace = _trace_for(args)
    print(",".join(str(int(i)) for i in trace.detected))
    return 0


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageFailure(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="renn", description="Rule-embedded FCN for ECG R-peak detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-level", dest="noise_level", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--channels", type=int)
    p.add_argument("--stage", choices=["1", "2", "both"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="TP/FP/FN/F1 on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--mode", choices=["local", "global"])
    p.add_argument("--tolerance-ms", dest="tolerance_ms", type=float)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("trace", cmd_trace, "write a per-sample X/F/R/O trace CSV"),
                                 ("infer", cmd_infer, "print detected R-peak indices")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--record", required=True)
        p.add_argument("--models", required=True)
        if name == "trace":
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageFailure as exc:
        print(f"renn: error: {exc}", file=sys.stderr)
        return 2
    except (RennError, OSError, KeyError, ValueError) as exc:
        print(f"renn: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
