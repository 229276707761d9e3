"""Optimizer, schedules and the centralized, federated and per-sample-gradient loops."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, backward, no_grad
from .data import Dataset, PreprocessSpec, augment_batch, preprocess
from .layers import BatchNorm2d, Context
from .models import LayerGraph, save_checkpoint
from .rng import Rng

_SHUFFLE, _AUGMENT, _NOISE = 0x5F, 0xA6, 0xD9


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss or gradient; carries the metrics gathered so far."""

    def __init__(self, message="divergence", history=None):
        super().__init__(message)
        self.history = history or []


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(params: dict, grads: dict, state: dict, cfg: SgdConfig, lr: float | None = None):
    """One in-place SGD update.

    ``v <- momentum * v + (g + weight_decay * theta)``; ``theta <- theta - lr * v``.
    ``params`` maps names to Tensors, ``grads`` and ``state`` map names to arrays.
    """
    lr = cfg.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"divergence: non-finite gradient for {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: grad {g.shape} vs param {p.shape}")
        d = g.astype(np.float64) + cfg.weight_decay * p.data
        if cfg.momentum:
            v = state.get(name)
            d = d if v is None else cfg.momentum * v + d
            state[name] = d
        p.data = (p.data - lr * d).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class SchedulerSpec:
    kind: str = "constant"  # constant | cosine | halving
    total_steps: int | None = None
    milestones: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "cosine", "halving"):
            raise ValueError(f"unknown scheduler {self.kind!r}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        object.__setattr__(self, "milestones", ms)


def lr_at(spec: SchedulerSpec, step: int, base_lr: float, total_steps: int | None = None) -> float:
    """Learning rate at ``step``; cosine counts optimizer steps, halving counts epochs."""
    if spec.kind == "constant":
        return base_lr
    if spec.kind == "cosine":
        total = spec.total_steps or total_steps
        if not total:
            raise ValueError("cosine schedule needs total_steps")
        return base_lr * (1 + math.cos(math.pi * min(step, total) / total)) / 2
    return base_lr / 2 ** sum(step >= m for m in spec.milestones)


# ---------------------------------------------------------------- configs and metrics

@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    sgd: SgdConfig = field(default_factory=SgdConfig)
    scheduler: SchedulerSpec = field(default_factory=SchedulerSpec)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    seed: int = 0
    eval_batch: int = 250

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class FedConfig:
    clients: int = 10
    rounds: int = 1
    local_epochs: int = 1
    client_seeds: tuple | None = None

    def __post_init__(self):
        if self.clients < 1 or self.rounds < 0 or self.local_epochs < 1:
            raise ValueError("need >= 1 client and >= 1 local epoch")


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = math.inf  # inf means unclipped
    noise_multiplier: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive (use inf for unclipped)")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_loss: float
    eval_acc: float
    lr: float
    wall_ms: float

    def rows(self):
        yield {"epoch": self.epoch, "split": "train", "loss": self.train_loss,
               "acc": self.train_acc, "lr": self.lr, "wall_ms": self.wall_ms}
        yield {"epoch": self.epoch, "split": "eval", "loss": self.eval_loss,
               "acc": self.eval_acc, "lr": self.lr, "wall_ms": self.wall_ms}


METRIC_COLUMNS = ("epoch", "split", "loss", "acc", "lr", "wall_ms")


def representative_accuracy(history, key="eval_acc", last=5) -> float:
    """Mean of ``key`` over the final ``last`` epochs (or rounds)."""
    if not history:
        return float("nan")
    return float(np.mean([getattr(m, key) for m in history[-last:]]))


def write_metrics(history, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "metrics.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for m in history:
            writer.writerows(m.rows())
    with open(os.path.join(directory, "metrics.jsonl"), "w") as fh:
        for m in history:
            fh.write(json.dumps(asdict(m)) + "\n")


def summarize(history, **extra) -> dict:
    out = {
        "epochs": len(history),
        "representative_eval_acc": representative_accuracy(history, "eval_acc"),
        "representative_train_acc": representative_accuracy(history, "train_acc"),
        "final_eval_acc": history[-1].eval_acc if history else float("nan"),
        "final_train_acc": history[-1].train_acc if history else float("nan"),
    }
    out.update(extra)
    return out


def write_run(directory, model: LayerGraph, history, summary: dict, step: int) -> None:
    write_metrics(history, directory)
    with open(os.path.join(directory, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=str)
    save_checkpoint(model, os.path.join(directory, "checkpoint"), step)


# ---------------------------------------------------------------- gradients

def _inputs(ds: Dataset, idx, cfg: TrainConfig, dtype, rng: Rng | None, keys=(), augment=True):
    x = preprocess(ds.images[idx], cfg.preprocess, dtype)
    if augment and rng is not None:
        x = augment_batch(x, cfg.preprocess, rng, keys, sample_ids=idx)
    return x, ds.labels[idx].astype(np.int64)


def loss_and_grads(model: LayerGraph, x, labels, ctx: Context):
    """Mean cross-entropy, logits, and gradients keyed by parameter name."""
    logits = model(Tensor(x), ctx)
    loss = ops.cross_entropy(logits, labels)
    grads = backward(loss)
    named = model.named_parameters()
    out = {}
    for name, p in named.items():
        g = grads.get(p)
        out[name] = np.zeros(p.shape, dtype=np.float64) if g is None else np.asarray(g, np.float64)
    return float(loss.data), logits.data, out


def per_sample_gradients(model: LayerGraph, x, labels, ctx: Context):
    """Gradient of each sample's loss in isolation (batch-of-one loop)."""
    if model.count_modules(BatchNorm2d):
        raise ValueError("per-sample gradients unavailable: model uses batch normalization")
    ids = ctx.sample_ids if ctx.sample_ids is not None else range(len(labels))
    out = []
    for r, sid in enumerate(ids):
        sub = Context(ctx.training, ctx.rng, ctx.step, [sid])
        _, _, g = loss_and_grads(model, x[r:r + 1], labels[r:r + 1], sub)
        out.append(g)
    return out


def evaluate(model: LayerGraph, ds: Dataset, cfg: TrainConfig) -> tuple[float, float]:
    """(mean loss, accuracy) in inference mode."""
    if ds is None or len(ds) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(ds), cfg.eval_batch):
            idx = np.arange(start, min(start + cfg.eval_batch, len(ds)))
            x, y = _inputs(ds, idx, cfg, model.dtype, None, augment=False)
            logits = model(Tensor(x), Context(False))
            total_loss += float(ops.cross_entropy(logits, y).data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / len(ds), correct / len(ds)


# ---------------------------------------------------------------- centralized

def _run_epoch(model, ds, cfg: TrainConfig, state, rng: Rng, epoch: int, step: int,
               lr_fn, stream=()):
    """One pass of shuffled mini-batches; returns (loss, acc, next step, last lr)."""
    params = model.named_parameters()
    order = rng.stream(_SHUFFLE, *stream, epoch).permutation(len(ds))
    loss_sum, correct, lr = 0.0, 0, lr_fn(step)
    for start in range(0, len(ds), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x, y = _inputs(ds, idx, cfg, model.dtype, rng, (_AUGMENT, *stream, epoch))
        ctx = Context(True, rng, step, [int(i) for i in idx])
        loss, logits, grads = loss_and_grads(model, x, y, ctx)
        if not math.isfinite(loss):
            raise TrainingDiverged("divergence: non-finite loss")
        lr = lr_fn(step)
        sgd_step(params, grads, state, cfg.sgd, lr)
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == y).sum())
        step += 1
    return loss_sum / max(len(ds), 1), correct / max(len(ds), 1), step, lr


def train_centralized(model: LayerGraph, train_ds: Dataset, cfg: TrainConfig,
                      eval_ds: Dataset | None = None, out_dir=None, log=None):
    """Epoch loop with shuffling, augmentation, SGD and a schedule.

    Returns ``(history, summary)``.  A non-finite loss raises
    :class:`TrainingDiverged` holding the partial history.
    """
    rng = Rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    epoch_of = lambda s: s // steps_per_epoch  # noqa: E731

    def lr_fn(step):
        unit = step if cfg.scheduler.kind == "cosine" else epoch_of(step)
        return lr_at(cfg.scheduler, unit, cfg.sgd.lr, total)

    history, state, step = [], {}, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        try:
            loss, acc, step, lr = _run_epoch(model, train_ds, cfg, state, rng, epoch, step, lr_fn)
        except TrainingDiverged as exc:
            exc.history = history
            if out_dir:
                write_metrics(history, out_dir)
            raise
        eval_loss, eval_acc = evaluate(model, eval_ds, cfg)
        m = EpochMetrics(epoch + 1, loss, acc, eval_loss, eval_acc, lr,
                         (time.perf_counter() - t0) * 1e3)
        history.append(m)
        if log:
            log(m)
    summary = summarize(history, regime="centralized", steps=step)
    if out_dir:
        write_run(out_dir, model, history, summary, step)
    return history, summary


# ---------------------------------------------------------------- federated

def weighted_average(states, weights):
    """Elementwise ``sum_k w_k * state_k`` over matching state dicts."""
    weights = np.asarray(weights, dtype=np.float64)
    out = {}
    for name in states[0]:
        acc = sum(w * np.asarray(s[name], dtype=np.float64) for w, s in zip(weights, states))
        out[name] = acc.astype(np.asarray(states[0][name]).dtype)
    return out


def fedavg_round(model: LayerGraph, global_state: dict, shards, cfg: TrainConfig,
                 fed: FedConfig, round_idx: int = 0):
    """One FederatedAveraging round.

    Every client starts from ``global_state`` with fresh (zero) momentum, trains
    ``local_epochs`` on its shard, and the server takes the shard-size-weighted
    average of the client states (parameters and buffers).  Returns the new
    state and the per-client (loss, acc, size) triples.
    """
    if not shards:
        raise ValueError("need at least one client")
    sizes = [len(s) for s in shards]
    if min(sizes) == 0:
        raise ValueError("empty client shard")
    seeds = fed.client_seeds or tuple(range(len(shards)))
    rng = Rng(cfg.seed)
    states, stats = [], []
    for k, shard in enumerate(shards):
        model.load_state_dict(global_state)
        momentum, step = {}, 0
        for e in range(fed.local_epochs):
            loss, acc, step, _ = _run_epoch(model, shard, cfg, momentum, rng, e, step,
                                            lambda s: cfg.sgd.lr,
                                            stream=(round_idx, seeds[k]))
        states.append(model.state_dict())
        stats.append((loss, acc, len(shard)))
    new_state = weighted_average(states, np.asarray(sizes) / sum(sizes))
    model.load_state_dict(new_state)
    return new_state, stats


def train_federated(model: LayerGraph, shards, cfg: TrainConfig, fed: FedConfig,
                    eval_ds: Dataset | None = None, out_dir=None, log=None):
    """``fed.rounds`` rounds of FedAvg; one metrics record per round."""
    history = []
    state = model.state_dict()
    for r in range(fed.rounds):
        t0 = time.perf_counter()
        state, stats = fedavg_round(model, state, shards, cfg, fed, r)
        n = sum(s[2] for s in stats)
        loss = sum(s[0] * s[2] for s in stats) / n
        acc = sum(s[1] * s[2] for s in stats) / n
        if not math.isfinite(loss):
            raise TrainingDiverged("divergence: non-finite loss", history)
        eval_loss, eval_acc = evaluate(model, eval_ds, cfg)
        m = EpochMetrics(r + 1, loss, acc, eval_loss, eval_acc, cfg.sgd.lr,
                         (time.perf_counter() - t0) * 1e3)
        history.append(m)
        if log:
            log(m)
    summary = summarize(history, regime="federated", clients=len(shards), rounds=fed.rounds)
    if out_dir:
        write_run(out_dir, model, history, summary, fed.rounds)
    return history, summary


# ---------------------------------------------------------------- per-sample gradients

def dp_sgd_step(model: LayerGraph, x, labels, dp: DpConfig, sgd: SgdConfig, rng: Rng,
                state: dict | None = None, step: int = 0, sample_ids=None, lr=None,
                training=True):
    """Clip each per-sample gradient to ``clip_norm``, add ``N(0, (sigma*C)^2)`` noise
    to the sum, average over the batch and take an SGD step.

    Returns ``(mean loss, applied gradient dict)``.
    """
    if len(labels) == 0:
        raise ValueError("empty batch")
    if model.count_modules(BatchNorm2d):
        raise ValueError("per-sample gradients unavailable: model uses batch normalization")
    ids = list(range(len(labels))) if sample_ids is None else list(sample_ids)
    params = model.named_parameters()
    total = {name: np.zeros(p.shape) for name, p in params.items()}
    losses = []
    for r, sid in enumerate(ids):
        ctx = Context(training, rng, step, [sid])
        loss, _, g = loss_and_grads(model, x[r:r + 1], labels[r:r + 1], ctx)
        losses.append(loss)
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        factor = min(1.0, dp.clip_norm / norm) if norm > 0 else 1.0
        for name, v in g.items():
            total[name] += factor * v
    if dp.noise_multiplier > 0:
        gen = rng.stream(_NOISE, step)
        std = dp.noise_multiplier * dp.clip_norm
        for name in total:
            total[name] += gen.normal(0.0, std, size=total[name].shape)
    applied = {name: v / len(ids) for name, v in total.items()}
    sgd_step(params, applied, {} if state is None else state, sgd, lr)
    return float(np.mean(losses)), applied


def train_dp(model: LayerGraph, train_ds: Dataset, cfg: TrainConfig, dp: DpConfig,
             eval_ds: Dataset | None = None, out_dir=None, log=None):
    """Epochs of shuffled batches of ``dp.batch_size``, each a :func:`dp_sgd_step`."""
    if model.count_modules(BatchNorm2d):
        raise ValueError("per-sample gradients unavailable: model uses batch normalization")
    rng = Rng(cfg.seed)
    history, state, step = [], {}, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg.scheduler, epoch, cfg.sgd.lr, cfg.epochs)
        order = rng.stream(_SHUFFLE, epoch).permutation(len(train_ds))
        losses = []
        for start in range(0, len(train_ds), dp.batch_size):
            idx = order[start:start + dp.batch_size]
            x, y = _inputs(train_ds, idx, cfg, model.dtype, rng, (_AUGMENT, epoch))
            loss, _ = dp_sgd_step(model, x, y, dp, cfg.sgd, rng, state, step,
                                  [int(i) for i in idx], lr)
            if not math.isfinite(loss):
                raise TrainingDiverged("divergence: non-finite loss", history)
            losses.append(loss * len(idx))
            step += 1
        train_loss, train_acc = evaluate(model, train_ds, cfg)
        eval_loss, eval_acc = evaluate(model, eval_ds, cfg)
        m = EpochMetrics(epoch + 1, sum(losses) / len(train_ds), train_acc, eval_loss, eval_acc,
                         lr, (time.perf_counter() - t0) * 1e3)
        history.append(m)
        if log:
            log(m)
    summary = summarize(history, regime="dp", clip_norm=dp.clip_norm,
                        noise_multiplier=dp.noise_multiplier)
    # the final epoch is the representative one for this regime
    summary["representative_eval_acc"] = summary["final_eval_acc"]
    if out_dir:
        write_run(out_dir, model, history, summary, step)
    return history, summary
