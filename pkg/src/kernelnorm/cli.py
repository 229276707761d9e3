"""``kn`` command-line entry point.

Settings resolve as: built-in defaults < ``--preset`` < ``--config`` JSON file
< explicit flags.  The JSON file is a flat object whose keys match the long
flag names with underscores (``{"lr": 0.05, "labels_per_client": 2}``).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

DEFAULTS = {
    "arch": "resnet8",
    "norm": "kernel",
    "data": "synth",
    "epochs": 3,
    "rounds": 5,
    "batch": 32,
    "lr": 0.05,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "scheduler": "cosine",
    "milestones": [],
    "seed": 0,
    "dtype": "f32",
    "out": None,
    "clients": 10,
    "labels_per_client": 2,
    "local_epochs": 1,
    "clip": math.inf,
    "noise": 0.0,
    "subset": None,
    "eval_subset": 2000,
    "synth_per_class": 20,
    "width": 1.0,
    "input_size": None,
    "num_classes": None,
    "augment": None,
    "kn_mode": "efficient",
}

# regime-specific defaults applied before presets
_REGIME_DEFAULTS = {
    "fed": {"momentum": 0.0, "weight_decay": 0.0, "scheduler": "constant", "lr": 0.02},
    "dp": {"momentum": 0.0, "weight_decay": 0.0, "scheduler": "constant", "clip": 1.0},
}

_INT_KEYS = {"epochs", "rounds", "batch", "seed", "clients", "labels_per_client", "local_epochs",
             "subset", "eval_subset", "synth_per_class", "input_size", "num_classes"}


class UsageError(ValueError):
    pass


def resolve_config(regime: str, flags: dict, preset: dict | None = None,
                   file_cfg: dict | None = None) -> dict:
    """Merge defaults, preset, config file and flags (later wins; ``None`` flags are unset)."""
    cfg = dict(DEFAULTS)
    cfg.update(_REGIME_DEFAULTS.get(regime, {}))
    for layer in (preset or {}, file_cfg or {}):
        for k, v in layer.items():
            if k in ("regime", "epsilon"):
                continue
            if k not in DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            cfg[k] = v
    for k, v in flags.items():
        if v is not None and k in DEFAULTS:
            cfg[k] = v
    return validate_config(regime, cfg)


def validate_config(regime: str, cfg: dict) -> dict:
    from .models import ARCHITECTURES, NORM_KINDS

    for k in _INT_KEYS:
        if cfg.get(k) is not None:
            cfg[k] = int(cfg[k])
    if cfg["arch"] not in ARCHITECTURES:
        raise UsageError(f"--arch must be one of {ARCHITECTURES}")
    if cfg["norm"] not in NORM_KINDS:
        raise UsageError(f"--norm must be one of {NORM_KINDS}")
    if cfg["dtype"] not in ("f32", "f64"):
        raise UsageError("--dtype must be f32 or f64")
    if cfg["scheduler"] not in ("constant", "cosine", "halving"):
        raise UsageError("--scheduler must be constant, cosine or halving")
    if cfg["lr"] < 0 or cfg["batch"] < 1 or cfg["epochs"] < 0 or cfg["rounds"] < 0:
        raise UsageError("lr, batch, epochs and rounds must be non-negative (batch >= 1)")
    if not 0 <= cfg["momentum"] < 1:
        raise UsageError("--momentum must lie in [0, 1)")
    if regime == "dp" and cfg["norm"] == "batch":
        raise UsageError("per-sample gradients unavailable for batch normalization; "
                         "choose --norm kernel, group, layer or instance")
    if regime == "dp" and (cfg["clip"] is None or float(cfg["clip"]) <= 0):
        raise UsageError("--clip must be positive")
    if regime == "fed" and (cfg["clients"] < 1 or cfg["labels_per_client"] < 1):
        raise UsageError("--clients and --labels-per-client must be >= 1")
    if cfg["data"] not in ("synth", "cifar10", "cifar100"):
        raise UsageError("--data must be synth, cifar10 or cifar100")
    cfg["clip"] = float(cfg["clip"])
    return cfg


# ---------------------------------------------------------------- builders

def _input_size(cfg) -> int:
    from .models import DEFAULT_INPUT

    if cfg["data"] != "synth":
        return 32
    return cfg["input_size"] or DEFAULT_INPUT[cfg["arch"]]


def _datasets(cfg):
    from .data import load_cifar, stratified_subset, synth_dataset, train_holdout_split

    if cfg["data"] == "synth":
        classes = cfg["num_classes"] or 10
        size = _input_size(cfg)
        ds = synth_dataset(classes, cfg["synth_per_class"], (size, size), seed=cfg["seed"])
        tr, ho = train_holdout_split(ds, 0.2, seed=cfg["seed"])
        return ds.subset(tr, "synth-train"), ds.subset(ho, "synth-holdout")
    train = load_cifar(cfg["data"], "train")
    test = load_cifar(cfg["data"], "test")
    if cfg["subset"]:
        train = train.subset(stratified_subset(train, cfg["subset"], cfg["seed"]))
    if cfg["eval_subset"] and cfg["eval_subset"] < len(test):
        test = test.subset(stratified_subset(test, cfg["eval_subset"], cfg["seed"]))
    return train, test


def _model(cfg, num_classes):
    from .models import ModelSpec, build_model

    spec = ModelSpec(cfg["arch"], cfg["norm"], num_classes=num_classes, width=cfg["width"],
                     input_size=_input_size(cfg), kn_mode=cfg["kn_mode"])
    dtype = np.float32 if cfg["dtype"] == "f32" else np.float64
    return build_model(spec, cfg["seed"], dtype)


def _train_config(cfg):
    from .data import CIFAR100_MEAN, CIFAR100_STD, PreprocessSpec
    from .training import SchedulerSpec, SgdConfig, TrainConfig

    augment = cfg["augment"] if cfg["augment"] is not None else cfg["data"] != "synth"
    pre = PreprocessSpec.cifar(cfg["norm"] == "kernel", augment=bool(augment))
    if cfg["data"] == "cifar100":
        pre.mean, pre.std = CIFAR100_MEAN, CIFAR100_STD
    size = _input_size(cfg)
    if pre.pad_crop is not None:
        pre.pad_crop = (4, size)
    sched = SchedulerSpec(cfg["scheduler"], milestones=tuple(cfg["milestones"] or ()))
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch"],
                       sgd=SgdConfig(cfg["lr"], cfg["momentum"], cfg["weight_decay"]),
                       scheduler=sched, preprocess=pre, seed=cfg["seed"])


def _out_dir(cfg, regime):
    out = cfg["out"] or os.path.join("runs", f"{regime}-{cfg['arch']}-{cfg['norm']}-s{cfg['seed']}")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, default=str)
    return out


def _log(m):
    print(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  train {m.train_acc:.4f}  "
          f"eval {m.eval_acc:.4f}  lr {m.lr:.5g}  {m.wall_ms / 1e3:.1f}s", flush=True)


# ---------------------------------------------------------------- commands

def cmd_verify(args) -> int:
    from .verify import format_table, run_suite

    results = run_suite(args.filter, log=(lambda r: print(r, flush=True)) if args.verbose else None)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return 2
    for r in failed:
        print(f"FAILED {r.group}/{r.name}: value={r.value!r} limit={r.limit!r} "
              f"inputs={json.dumps(r.inputs, default=str)}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_train(cfg) -> int:
    from .training import train_centralized

    out = _out_dir(cfg, "train")
    train, held = _datasets(cfg)
    model = _model(cfg, train.class_count)
    _, summary = train_centralized(model, train, _train_config(cfg), held, out, _log)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_fed(cfg) -> int:
    from .data import noniid_partition
    from .rng import Rng
    from .training import FedConfig, train_federated

    out = _out_dir(cfg, "fed")
    train, held = _datasets(cfg)
    parts = noniid_partition(train, cfg["clients"], cfg["labels_per_client"], Rng(cfg["seed"]))
    shards = [train.subset(p, f"client{k}") for k, p in enumerate(parts)]
    model = _model(cfg, train.class_count)
    fed = FedConfig(cfg["clients"], cfg["rounds"], cfg["local_epochs"])
    _, summary = train_federated(model, shards, _train_config(cfg), fed, held, out, _log)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_dp(cfg) -> int:
    from .training import DpConfig, train_dp

    out = _out_dir(cfg, "dp")
    train, held = _datasets(cfg)
    model = _model(cfg, train.class_count)
    dp = DpConfig(cfg["clip"], cfg["noise"], cfg["batch"])
    _, summary = train_dp(model, train, _train_config(cfg), dp, held, out, _log)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .knconv import bench_knconv, write_bench_report

    report = bench_knconv(tuple(args.shape), args.filters, args.kernel, args.stride, args.padding,
                          args.repeats, args.dtype, args.seed or 0, not args.forward_only)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    write_bench_report(report, os.path.join(out, "bench.json"))
    print(json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------- parser

def _run_flags(p: argparse.ArgumentParser, regime: str):
    p.add_argument("--arch")
    p.add_argument("--norm")
    p.add_argument("--data", help="synth | cifar10 | cifar100 (CIFAR read from $KN_DATA_DIR)")
    p.add_argument("--epochs", type=int)
    if regime == "fed":
        p.add_argument("--rounds", type=int)
        p.add_argument("--clients", type=int)
        p.add_argument("--labels-per-client", dest="labels_per_client", type=int)
        p.add_argument("--local-epochs", dest="local_epochs", type=int)
    if regime == "dp":
        p.add_argument("--clip", type=float)
        p.add_argument("--noise", type=float, help="noise multiplier sigma")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--scheduler", choices=("constant", "cosine", "halving"))
    p.add_argument("--milestones", type=int, nargs="*")
    p.add_argument("--preset")
    p.add_argument("--config", help="JSON file of settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--out")
    p.add_argument("--subset", type=int, help="stratified training subset size")
    p.add_argument("--eval-subset", dest="eval_subset", type=int)
    p.add_argument("--synth-per-class", dest="synth_per_class", type=int)
    p.add_argument("--width", type=float, help="channel width multiplier")
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kn", description="Kernel-normalized CNN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--filter", help="group (equiv, grad, shape, batchind, persample) or name part")
    v.add_argument("-v", "--verbose", action="store_true")
    for regime, text in (("train", "centralized training"), ("fed", "FedAvg simulation"),
                         ("dp", "per-sample-gradient SGD")):
        _run_flags(sub.add_parser(regime, help=text), regime)
    b = sub.add_parser("bench", help="time naive vs efficient KNConv")
    b.add_argument("--shape", type=int, nargs=4, default=[8, 64, 32, 32])
    b.add_argument("--filters", type=int, default=64)
    b.add_argument("--kernel", type=int, default=3)
    b.add_argument("--stride", type=int, default=1)
    b.add_argument("--padding", type=int, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    b.add_argument("--seed", type=int)
    b.add_argument("--forward-only", action="store_true")
    b.add_argument("--out")
    return parser


def config_from_args(args) -> dict:
    from .presets import get_preset

    flags = {k: v for k, v in vars(args).items() if k not in ("command", "preset", "config")}
    try:
        preset = get_preset(args.preset) if args.preset else None
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    file_cfg = None
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    return resolve_config(args.command, flags, preset, file_cfg)


_COMMANDS = {"train": cmd_train, "fed": cmd_fed, "dp": cmd_dp}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify":
        return cmd_verify(args)
    if args.command == "bench":
        if args.repeats < 3:
            parser.error("--repeats must be >= 3")
        return cmd_bench(args)
    try:
        cfg = config_from_args(args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        return _COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"kn: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
