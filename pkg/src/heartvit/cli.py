"""``prune``: command-line front end for training, pruning and reporting.

Every command resolves its settings as flags over config file over
defaults, writes a manifest next to its main output before starting, and
writes outputs atomically.  Exit status: 0 ok, 1 contract error, 2 I/O or
format error, 64 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import secrets
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import layer_report
from .autodiff import make_rng
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .cost import check_reference, parse_grid, reduction_table, table_csv
from .data import DatasetSpec, generate_synthetic, read_directory, write_directory
from .errors import ConfigError, ContractError, FormatError, HeartError
from .model import VIT_B16, ViTConfig, forward, init_model, predict
from .pipeline import (FinetuneConfig, TrainConfig, calibrate, evaluate, finetune, metrics_csv,
                       stack_decisions, train)
from .policy import PruningPolicy, select
from .sensitivity import CalibrationStats, score_all

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Settings resolution
# ---------------------------------------------------------------------------


def _section(prefix: str, obj) -> dict:
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj)}


def _defaults(command: str) -> dict:
    d = {}
    if command == "dataset":
        d.update(_section("data", DatasetSpec()))
        for k in ("data.source", "data.path", "data.seed"):
            d.pop(k)
    if command in ("train",):
        d.update(_section("model", ViTConfig()))
        d.update(_section("train", TrainConfig(epochs=30, patience=10, shift_aug=8)))
        d.pop("train.seed")
    if command in ("train", "finetune"):
        d["data.val_fraction"] = 0.2
    if command == "finetune":
        d.update(_section("finetune", FinetuneConfig()))
        for k in ("finetune.seed", "finetune.gamma0", "finetune.gamma_max"):
            d.pop(k)
    if command == "flops":
        d.update(_section("model", VIT_B16))
    if command == "bench":
        d["bench.batch"] = 8
        d["reps"] = 10
    if command in ("calibrate", "finetune", "analyze"):
        d["calib_size"] = 32
    if command == "finetune":
        d["gamma0"], d["gamma_max"] = 1.0, 50.0
    if command == "flops":
        d["grid"], d["mode"] = "sym:20,40,50,60,80", "masked"
    return d


def _coerce(key: str, text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        t = text.strip()
        if t.lower() in ("", "none"):
            return None
        try:
            return int(t)
        except ValueError:
            return t
    return text.strip()


def read_config_file(path, defaults: dict) -> dict:
    """``key=value`` lines; keys must name a known setting of the command."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        if key not in defaults:
            raise ContractError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            out[key] = _coerce(key, value, defaults[key])
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def _build(cls, settings: dict, prefix: str, **extra):
    kw = {f.name: settings[f"{prefix}.{f.name}"] for f in fields(cls) if f"{prefix}.{f.name}" in settings}
    kw.update(extra)
    return cls(**kw)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def manifest_path(out) -> Path:
    out = Path(out)
    return out.parent / (out.name + ".manifest.json")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


_PATH_ARGS = ("ckpt", "data", "policy", "out", "check_paper")
_FILE_ARGS = ("ckpt", "data", "out")


class Run:
    def __init__(self, command: str, args, settings: dict, seed: int):
        self.command = command
        self.args = args
        self.settings = settings
        self.seed = seed
        self.manifest = {
            "command": command,
            "config": settings,
            "seed": seed,
            "arguments": {k: (str(Path(v).resolve()) if k in _FILE_ARGS else v)
                          for k, v in sorted(vars(args).items()) if k in _PATH_ARGS and v is not None},
            "version": __version__,
            "started": _now(),
            "finished": None,
        }

    def start(self):
        _write_json(manifest_path(self.args.out), self.manifest)

    def finish(self):
        self.manifest["finished"] = _now()
        _write_json(manifest_path(self.args.out), self.manifest)


def _require(path, what):
    if path is None:
        raise ContractError(f"--{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_data(path):
    _require(path, "data")
    return read_directory(path)


def _held_out(ds, fraction, seed):
    if fraction <= 0:
        return ds, None
    a, b = ds.split(1.0 - fraction, seed=seed)
    return a, b


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_dataset(run: Run):
    s = run.settings
    spec = DatasetSpec(source="synthetic", seed=run.seed,
                       **{k.split(".", 1)[1]: v for k, v in s.items() if k.startswith("data.")})
    run.start()
    write_directory(generate_synthetic(spec), run.args.out)


def cmd_train(run: Run):
    data = _load_data(run.args.data)
    s = run.settings
    cfg = _build(ViTConfig, s, "model")
    tcfg = _build(TrainConfig, s, "train", seed=run.seed)
    run.start()
    tr, va = _held_out(data, s["data.val_fraction"], run.seed)
    out = Path(run.args.out)
    model, record = train(init_model(cfg, run.seed), tr, tcfg, val=va, record_path=str(out) + ".record.jsonl")
    rows = []
    for e in record.entries:
        rows.append({"epoch": e["epoch"], "split": "train", "loss": e["train_loss"], "accuracy": e["train_acc"]})
        if va is not None:
            rows.append({"epoch": e["epoch"], "split": "val", "loss": e["val_loss"], "accuracy": e["val_acc"]})
    atomic_write_bytes(str(out) + ".metrics.csv", metrics_csv(rows).encode("utf-8"))
    save_checkpoint(model, out)


def _calib_batch(data, size, seed):
    if size <= 0:
        raise ContractError("--calib-size must be positive")
    idx = np.sort(make_rng(seed).permutation(len(data))[:size])
    return data.images[idx]


def cmd_calibrate(run: Run):
    _require(run.args.ckpt, "ckpt")
    data = _load_data(run.args.data)
    model = load_checkpoint(run.args.ckpt)
    policy = PruningPolicy.parse(run.args.policy)
    run.start()
    stats, report = calibrate(model, _calib_batch(data, run.settings["calib_size"], run.seed), policy)
    atomic_write_bytes(str(run.args.out) + ".scores.json", report.to_json().encode("utf-8"))
    atomic_write_bytes(run.args.out, stats.to_json().encode("utf-8"))


def cmd_eval(run: Run):
    _require(run.args.ckpt, "ckpt")
    data = _load_data(run.args.data)
    model = load_checkpoint(run.args.ckpt)
    policy = PruningPolicy.parse(run.args.policy) if run.args.policy else None
    run.start()
    res = evaluate(model, data, policy)
    atomic_write_bytes(run.args.out, metrics_csv(res.rows()).encode("utf-8"))


def cmd_finetune(run: Run):
    _require(run.args.ckpt, "ckpt")
    data = _load_data(run.args.data)
    model = load_checkpoint(run.args.ckpt)
    policy = PruningPolicy.parse(run.args.policy)
    s = run.settings
    fcfg = _build(FinetuneConfig, s, "finetune", seed=run.seed,
                  gamma0=s["gamma0"], gamma_max=s["gamma_max"])
    run.start()
    tr, held = _held_out(data, s["data.val_fraction"], run.seed)
    stats, _ = calibrate(model, _calib_batch(tr, run.settings["calib_size"], run.seed), policy)
    out = Path(run.args.out)
    before = evaluate(model, held, policy, stats) if held is not None else None
    tuned, record = finetune(model, tr, policy, stats, fcfg, eval_set=held,
                             record_path=str(out) + ".record.jsonl")
    rows = []
    if before is not None:
        rows += [dict(r, split="before-" + r["split"]) for r in before.rows()]
    rows += [{"epoch": e["epoch"], "split": "finetune", "loss": e["loss"], "gamma": e["gamma"],
              "pred_dl": e["pred_dl"]} for e in record.entries]
    if record.summary:
        sm = record.summary
        rows.append({"split": "after-pruned", "loss": sm["loss"], "accuracy": sm["accuracy"],
                     "gamma": fcfg.gamma_max, "meas_dl": sm["meas_dl"]})
    atomic_write_bytes(str(out) + ".metrics.csv", metrics_csv(rows).encode("utf-8"))
    atomic_write_bytes(str(out) + ".stats.json", stats.to_json().encode("utf-8"))
    save_checkpoint(tuned, out)


def cmd_flops(run: Run):
    s = run.settings
    cfg = _build(ViTConfig, s, "model")
    try:
        grid = parse_grid(s["grid"])
    except ConfigError as exc:
        raise UsageError(f"--grid: {exc}") from exc
    run.start()
    dense, rows = reduction_table(cfg, grid, s["mode"])
    atomic_write_bytes(run.args.out, table_csv(dense, rows).encode("utf-8"))
    if run.args.check_paper:
        problems = check_reference(dense, rows)
        for p in problems:
            print(f"deviation: {p}", file=sys.stderr)
        if problems:
            return EXIT_CONTRACT
    return EXIT_OK


def _timed(fn, reps):
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return {"median_s": float(np.median(out)), "p90_s": float(np.quantile(out, 0.9))}


def cmd_bench(run: Run):
    _require(run.args.ckpt, "ckpt")
    model = load_checkpoint(run.args.ckpt)
    policy = PruningPolicy.parse(run.args.policy)
    if run.settings["reps"] < 10:
        raise ContractError("--reps must be at least 10")
    cfg = model.config
    run.start()
    B = run.settings["bench.batch"]
    if run.args.data:
        batch = _calib_batch(_load_data(run.args.data), B, run.seed)
    else:
        batch = make_rng(run.seed).standard_normal((B, cfg.channels, cfg.image_size, cfg.image_size))
    decision = select(score_all(model, batch), policy)
    gates = decision.gateset
    timing = {
        "dense": _timed(lambda: predict(model, batch), run.settings["reps"]),
        "mask": _timed(lambda: predict(model, batch, gates, "mask"), run.settings["reps"]),
        "compact": _timed(lambda: forward(model, batch, gates, "compact", record=False), run.settings["reps"]),
    }
    med = {k: v["median_s"] for k, v in timing.items()}
    report = {
        "policy": policy.to_text(),
        "batch": B,
        "reps": run.settings["reps"],
        "tokens_per_layer": [int(t) for t in gates.kept_tokens()],
        "heads_per_layer": [int(h) for h in (np.asarray(gates.head) > 0).sum(axis=-1)],
        "ordering_as_expected": bool(med["compact"] <= med["mask"] <= med["dense"]),
        "timing": timing,
    }
    if not report["ordering_as_expected"]:
        print("note: medians not ordered compact <= mask <= dense", file=sys.stderr)
    _write_json(run.args.out, report)


def cmd_analyze(run: Run):
    _require(run.args.ckpt, "ckpt")
    data = _load_data(run.args.data)
    model = load_checkpoint(run.args.ckpt)
    policy = PruningPolicy.parse(run.args.policy)
    run.start()
    images = _calib_batch(data, run.settings["calib_size"], run.seed)
    _, dense = forward(model, images)
    report = score_all(model, images)
    gates = stack_decisions([select(report, policy, input=b) for b in range(report.inputs)])
    _, pruned = forward(model, images, gates, mode="compact")
    atomic_write_bytes(run.args.out, layer_report(dense, pruned).to_csv().encode("utf-8"))


COMMANDS = {
    "dataset": cmd_dataset, "train": cmd_train, "calibrate": cmd_calibrate, "eval": cmd_eval,
    "finetune": cmd_finetune, "flops": cmd_flops, "bench": cmd_bench, "analyze": cmd_analyze,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"prune {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, help="seed for every stochastic step (chosen and recorded if omitted)")
        sp.add_argument("--config", help="key=value settings file (flags take precedence)")

    sp = sub.add_parser("dataset", help="generate a synthetic dataset directory")
    common(sp, "dataset directory")

    sp = sub.add_parser("train", help="train a model from scratch")
    common(sp, "checkpoint path")
    sp.add_argument("--data", help="dataset directory")

    sp = sub.add_parser("calibrate", help="Phase A: batch-averaged scores and statistics")
    common(sp, "statistics JSON")
    for f in ("ckpt", "data"):
        sp.add_argument(f"--{f}")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--calib-size", type=int)

    sp = sub.add_parser("eval", help="dense and per-input pruned evaluation")
    common(sp, "metrics CSV")
    for f in ("ckpt", "data", "policy"):
        sp.add_argument(f"--{f}")

    sp = sub.add_parser("finetune", help="Phase C: soft-gate fine-tuning")
    common(sp, "fine-tuned checkpoint path")
    for f in ("ckpt", "data"):
        sp.add_argument(f"--{f}")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--calib-size", type=int)
    sp.add_argument("--gamma0", type=float)
    sp.add_argument("--gamma-max", type=float)

    sp = sub.add_parser("flops", help="analytic MAC table")
    common(sp, "CSV path")
    sp.add_argument("--grid", help="e.g. sym:20,40 or asym:20/80 (default sym:20,40,50,60,80)")
    sp.add_argument("--mode", choices=["masked", "compact"])
    sp.add_argument("--check-paper", action="store_true",
                    help="exit 1 if a row deviates from the reference ViT-B/16 totals")

    sp = sub.add_parser("bench", help="wall-clock forward timings")
    common(sp, "timing report JSON")
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--reps", type=int, help="timed repetitions, at least 10")

    sp = sub.add_parser("analyze", help="dense vs pruned layer report")
    common(sp, "layer report CSV")
    for f in ("ckpt", "data"):
        sp.add_argument(f"--{f}")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--calib-size", type=int)

    sp = sub.add_parser("rerun", help="repeat a run from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="write outputs here instead of the recorded path")
    return p


_FLAG_SETTINGS = ("calib_size", "gamma0", "gamma_max", "reps", "grid", "mode")


def _flag_settings(args) -> dict:
    return {k: getattr(args, k) for k in _FLAG_SETTINGS if getattr(args, k, None) is not None}


def _prepare(args) -> Run:
    defaults = _defaults(args.command)
    settings = dict(defaults)
    if args.config:
        _require(args.config, "config")
        settings.update(read_config_file(args.config, defaults))
    settings.update(_flag_settings(args))
    seed = args.seed if args.seed is not None else secrets.randbelow(2**31)
    return Run(args.command, args, settings, seed)


def _from_manifest(path, out=None) -> Run:
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        command, settings, seed, recorded = m["command"], m["config"], m["seed"], m["arguments"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest lacks {exc}") from exc
    if command not in COMMANDS:
        raise FormatError(f"{path}: unknown command {command!r}")
    ns = argparse.Namespace(command=command, config=None, seed=seed,
                            **{k: recorded.get(k) for k in _PATH_ARGS})
    if out is not None:
        ns.out = out
    return Run(command, ns, settings, seed)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        run = _from_manifest(args.manifest, args.out) if args.command == "rerun" else _prepare(args)
        status = COMMANDS[run.command](run) or EXIT_OK
        run.finish()
        return status
    except UsageError as exc:
        print(f"prune: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"prune: {exc}", file=sys.stderr)
        return EXIT_IO
    except HeartError as exc:
        print(f"prune: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except json.JSONDecodeError as exc:
        print(f"prune: malformed manifest: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
