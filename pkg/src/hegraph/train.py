"""End-to-end tuning loop: shuffled mini-batches over the cache samples,
forward/backward through the adapter, optimizer stepping under the warmup +
cosine schedule, ablation variants, evaluation, and checkpoint state.

Determinism: all randomness flows from one integer seed through named PCG64
streams (stream 1: weight init, stream 2: per-epoch shuffles keyed by epoch
index), so identical (graph, config, seed) yields bitwise identical
checkpoints, and resuming from a saved epoch reproduces uninterrupted
training exactly. The loop exclusively owns the weights and optimizer state;
evaluation fans out across query chunks with order-independent counts.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import optim
from .adapter import AdapterOutput, AdapterWeights, MetaPathWeights, backward, forward
from .classifier import predict, total_loss
from .errors import ConfigError, DimMismatchError
from .graph import HeteroGraph

VARIANTS = ("base", "T-N", "T-P", "T", "full")

#: variants whose configuration reads the negative text nodes
NEGATIVE_VARIANTS = frozenset({"T-N", "T", "full"})

#: per-dataset-style presets: learning rate and epoch budget
PROFILES = {
    "standard": {"lr_base": 1e-3, "epochs": 30},
    "long": {"lr_base": 1e-3, "epochs": 100},
    "aircraft": {"lr_base": 1e-2, "epochs": 100},
}

_INIT_STREAM = 1
_SHUFFLE_STREAM = 2


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def variant_needs_negatives(variant: str) -> bool:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return variant in NEGATIVE_VARIANTS


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_base: float = 1e-3
    seed: int = 0
    tau: float = 0.01
    lam: float = 0.1
    mp: MetaPathWeights = field(default_factory=MetaPathWeights)
    variant: str = "full"
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    init_std: float = 1e-4
    manifest_path: Optional[str] = None

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.lr_base <= 0 or self.warmup_lr <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_base": self.lr_base,
            "seed": self.seed,
            "tau": self.tau,
            "lam": self.lam,
            "variant": self.variant,
            "warmup_epochs": self.warmup_epochs,
            "warmup_lr": self.warmup_lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "init_std": self.init_std,
            "manifest_path": self.manifest_path,
            "mp": {
                "beta_pn": self.mp.beta_pn,
                "beta_vn": self.mp.beta_vn,
                "alpha_pp": self.mp.alpha_pp,
                "alpha_vp": self.mp.alpha_vp,
                "alpha_np_train": self.mp.alpha_np_train,
                "alpha_np_test": self.mp.alpha_np_test,
                "gamma": self.mp.gamma,
            },
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        mp = MetaPathWeights(**d.pop("mp"))
        d["betas"] = tuple(d["betas"])
        return cls(mp=mp, **d)


@dataclass(frozen=True)
class VariantPlan:
    """Effective switches for one ablation variant: which stages run, the
    effective meta-path weights, loss balance, and inference mode."""

    mp: MetaPathWeights
    lam: float
    negative_enabled: bool
    visual_enabled: bool
    text_only: bool
    trainable: bool


def plan_variant(config: TrainConfig) -> VariantPlan:
    """Map an ablation variant name to its effective configuration.

    base: no stages, nothing trained (zero-shot path). T-N: only negative
    aggregation, routed into the prompts via the n->p residual. T-P: only
    positive/visual relations (no negatives). T: both text stages, text loss
    only. full: everything, combined loss.
    """
    mp, v = config.mp, config.variant
    if v == "base":
        return VariantPlan(mp.zeroed(), 0.0, False, False, True, False)
    if v == "T-N":
        return VariantPlan(mp.replace(alpha_pp=0.0, alpha_vp=0.0), 0.0,
                           True, False, True, True)
    if v == "T-P":
        return VariantPlan(mp.replace(alpha_np_train=0.0, alpha_np_test=0.0), 0.0,
                           False, False, True, True)
    if v == "T":
        return VariantPlan(mp, 0.0, True, False, True, True)
    if v == "full":
        return VariantPlan(mp, config.lam, True, True, False, True)
    raise ConfigError(f"unknown variant {v!r}")


@dataclass
class Checkpoint:
    weights: AdapterWeights
    opt: optim.OptimState
    config: TrainConfig
    epoch: int
    history: dict[str, list[float]]


@dataclass(frozen=True)
class EvalResult:
    fused_accuracy: float
    text_accuracy: float
    count: int


def _eval_threads() -> int:
    raw = os.environ.get("HEGRAPH_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _count_correct(queries, labels, out, onehot, tau, lam, text_only) -> int:
    preds = predict(queries, out, onehot, tau, lam, text_only=text_only)
    return int(np.sum(preds == labels))


def evaluate(
    graph: HeteroGraph,
    weights: AdapterWeights,
    queries: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> EvalResult:
    """Top-1 accuracy of fused inference (test mode) plus the text-only score.

    Fans query chunks out over up to HEGRAPH_THREADS workers; accuracy is an
    order-independent sum of per-chunk correct counts.
    """
    queries = np.asarray(queries)
    labels = np.asarray(labels, dtype=np.int64)
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise DimMismatchError(f"test queries must be a nonempty 2-D array, got {queries.shape}")
    if labels.shape != (queries.shape[0],):
        raise DimMismatchError(
            f"labels shape {labels.shape} != ({queries.shape[0]},)"
        )
    plan = plan_variant(config.validate())
    out = forward(
        graph, weights, plan.mp, "test",
        negative_enabled=plan.negative_enabled,
        visual_enabled=plan.visual_enabled,
    )
    n = queries.shape[0]
    workers = min(_eval_threads(), n)
    chunks = [
        (queries[a:b], labels[a:b])
        for a, b in _chunk_bounds(n, workers)
    ]

    def run(text_only: bool) -> int:
        if len(chunks) == 1:
            return _count_correct(*chunks[0], out, graph.onehot, config.tau,
                                  plan.lam, text_only)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_count_correct, q, y, out, graph.onehot,
                            config.tau, plan.lam, text_only)
                for q, y in chunks
            ]
            return sum(f.result() for f in futures)

    fused = run(text_only=plan.text_only)
    text = run(text_only=True)
    return EvalResult(fused_accuracy=fused / n, text_accuracy=text / n, count=n)


def _chunk_bounds(n: int, parts: int):
    parts = max(1, min(parts, n))
    size = math.ceil(n / parts)
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def zero_shot_accuracy(graph: HeteroGraph, queries: np.ndarray,
                       labels: np.ndarray) -> float:
    """Plain cosine matching of queries against the raw positive prompt nodes
    (the untouched-similarity baseline)."""
    queries = np.asarray(queries)
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.argmax(queries @ graph.xp.T, axis=1)
    return float(np.mean(preds == labels))


def train(
    graph: HeteroGraph,
    config: TrainConfig,
    eval_set: Optional[tuple[np.ndarray, np.ndarray]] = None,
    start: Optional[Checkpoint] = None,
    log: Optional[Callable[[dict], None]] = None,
    plan: Optional[VariantPlan] = None,
) -> Checkpoint:
    """Tune the three projection matrices on the graph's cache samples.

    Per batch the full graph forward is recomputed (node inputs are constant
    but weights change), the combined loss is taken over the batch queries,
    and the hand-derived gradients drive one optimizer step. `start` resumes
    a checkpoint produced by the same config; `plan` overrides the variant
    switches (advanced use; defaults to plan_variant(config)).
    """
    config.validate()
    if plan is None:
        plan = plan_variant(config)
    d = graph.dim
    n_cache = graph.num_cache

    history: dict[str, list[float]] = {
        "train_loss": [], "fused_accuracy": [], "text_accuracy": [],
    }

    if not plan.trainable:
        weights = AdapterWeights.zeros(d)
        opt = optim.OptimState.for_params(
            weights.as_dict(), config.lr_base, config.betas, config.eps,
            config.weight_decay,
        )
        ckpt = Checkpoint(weights, opt, config, epoch=0, history=history)
        _record_eval(graph, ckpt, config, eval_set, history, log,
                     {"event": "final", "variant": config.variant, "epoch": 0})
        return ckpt

    if plan.negative_enabled and not graph.has_negatives:
        raise ConfigError(
            f"variant {config.variant!r} needs negative prompts, "
            "but the graph has none"
        )

    if start is not None:
        _check_resume(start, config)
        weights = start.weights.copy()
        opt = optim.OptimState(
            m={k: v.copy() for k, v in start.opt.m.items()},
            v={k: v.copy() for k, v in start.opt.v.items()},
            step=start.opt.step,
            lr_base=start.opt.lr_base,
            betas=start.opt.betas,
            eps=start.opt.eps,
            weight_decay=start.opt.weight_decay,
        )
        start_epoch = start.epoch
        history = {k: list(v) for k, v in start.history.items()}
    else:
        weights = AdapterWeights.gaussian(
            d, _rng(config.seed, _INIT_STREAM), std=config.init_std
        )
        opt = optim.OptimState.for_params(
            weights.as_dict(), config.lr_base, config.betas, config.eps,
            config.weight_decay,
        )
        start_epoch = 0

    steps_per_epoch = math.ceil(n_cache / config.batch_size)
    sched = optim.Schedule(
        lr_base=config.lr_base,
        total_epochs=config.epochs,
        steps_per_epoch=steps_per_epoch,
        warmup_epochs=config.warmup_epochs,
        warmup_lr=config.warmup_lr,
    )
    params = weights.as_dict()
    queries = graph.xcache
    labels = graph.labels
    global_step = start_epoch * steps_per_epoch

    for epoch in range(start_epoch, config.epochs):
        order = _rng(config.seed, _SHUFFLE_STREAM, epoch).permutation(n_cache)
        loss_sum = 0.0
        lr = sched.warmup_lr
        for at in range(0, n_cache, config.batch_size):
            idx = order[at:at + config.batch_size]
            out = forward(
                graph, weights, plan.mp, "train",
                negative_enabled=plan.negative_enabled,
                visual_enabled=plan.visual_enabled,
            )
            breakdown, d_xp, d_xcache = total_loss(
                queries[idx], labels[idx], out, graph.onehot, config.tau, plan.lam
            )
            grads = backward(out.tape, d_xp, d_xcache)
            lr = sched.lr_at(global_step)
            optim.step(params, grads, opt, lr)
            global_step += 1
            loss_sum += breakdown.total * idx.size
        epoch_loss = loss_sum / n_cache
        history["train_loss"].append(epoch_loss)
        record = {
            "event": "epoch", "epoch": epoch + 1, "epochs": config.epochs,
            "train_loss": epoch_loss, "lr": lr,
        }
        if eval_set is not None:
            res = evaluate(graph, weights, eval_set[0], eval_set[1], config)
            history["fused_accuracy"].append(res.fused_accuracy)
            history["text_accuracy"].append(res.text_accuracy)
            record["fused_accuracy"] = res.fused_accuracy
            record["text_accuracy"] = res.text_accuracy
        if log is not None:
            log(record)

    return Checkpoint(weights, opt, config, epoch=config.epochs, history=history)


def _record_eval(graph, ckpt, config, eval_set, history, log, record):
    if eval_set is not None:
        res = evaluate(graph, ckpt.weights, eval_set[0], eval_set[1], config)
        history["fused_accuracy"].append(res.fused_accuracy)
        history["text_accuracy"].append(res.text_accuracy)
        record["fused_accuracy"] = res.fused_accuracy
        record["text_accuracy"] = res.text_accuracy
    if log is not None:
        log(record)


def _check_resume(start: Checkpoint, config: TrainConfig) -> None:
    a = start.config.to_dict()
    b = config.to_dict()
    for skip in ("epochs", "manifest_path"):
        a.pop(skip), b.pop(skip)
    if a != b:
        raise ConfigError("resume config differs from the checkpoint's config")
    if start.epoch > config.epochs:
        raise ConfigError(
            f"checkpoint is at epoch {start.epoch} > configured {config.epochs}"
        )
