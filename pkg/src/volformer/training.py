"""Optimization protocol: focal loss, Adam with linear warmup and decoupled
weight decay, balanced-resampling epochs, snapshot selection on validation
average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .architectures import ModelConfig, ModelGraph, build_model
from .cohort import resample_balance
from .errors import ConfigError, DivergenceError
from .evaluation import average_precision, pool_progression, roc_auc
from .nn import Ctx
from .volume import AugmentPolicy, SliceStack, augment


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    lr_start: float = 1e-5
    lr_main: float = 1e-4
    weight_decay: float = 1e-4
    focal_gamma: float = 2.0
    batch_size: int = 4
    seed: int = 0
    snapshot_metric: str = "average_precision"
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    grad_clip: float | None = None  # off by default

    def validate(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if min(self.lr_start, self.lr_main) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0 or self.focal_gamma < 0:
            raise ConfigError("weight_decay and focal_gamma must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.snapshot_metric != "average_precision":
            raise ConfigError(f"unsupported snapshot metric {self.snapshot_metric!r}")
        return self


_clamp_warnings = 0


def focal_clamp_count():
    """How many times a zero class probability had to be clamped."""
    return _clamp_warnings


def focal_loss(probs, targets, gamma=2.0):
    """Mean over the batch of -(1 - p_t)^gamma * log(p_t), uniform alpha.

    ``probs`` are already-normalized class probabilities (rows sum to 1);
    gamma = 0 reduces exactly to cross-entropy. Zero probabilities are
    clamped at 1e-12 and counted (see focal_clamp_count).
    """
    global _clamp_warnings
    probs = probs if isinstance(probs, ag.Tensor) else ag.tensor(probs)
    targets = np.asarray(targets, dtype=np.intp)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise ConfigError(f"focal loss expects (B, C) probs with B targets, "
                          f"got {probs.shape} and {targets.shape}")
    p_t = probs[np.arange(len(targets)), targets]
    n_clamped = int(np.sum(p_t.data < 1e-12))
    if n_clamped:
        _clamp_warnings += n_clamped
        p_t = ag.clamp_min(p_t, 1e-12)
    nll = -ag.log(p_t)
    if gamma == 0.0:
        return nll.mean()
    return (((1.0 - p_t) ** gamma) * nll).mean()


def lr_schedule(epoch, cfg: TrainConfig):
    """Linear warmup from lr_start over warmup_epochs, then constant lr_main."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_start + (cfg.lr_main - cfg.lr_start) * (epoch / cfg.warmup_epochs)
    return cfg.lr_main


class AdamState:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(named_tensors, state: AdamState, lr, weight_decay=0.0):
    """One Adam update with decoupled weight decay (applied before the
    moment update as p <- p - lr * wd * p). Mutates tensor data in place."""
    state.t += 1
    b1, b2, eps, t = state.beta1, state.beta2, state.eps, state.t
    for name, tensor in named_tensors:
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in tensor {name!r}")
        if weight_decay:
            tensor.data *= 1.0 - lr * weight_decay
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data, dtype=np.float64)
            state.v[name] = np.zeros_like(tensor.data, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(tensor.data.dtype)


@dataclass
class SampleSet:
    """Model-ready samples: uint8 slice stacks per view plus class labels."""

    knee_ids: list
    labels: np.ndarray
    slices: dict  # view -> (N, k, H, W) uint8

    def __len__(self):
        return len(self.knee_ids)

    def subset(self, indices):
        indices = np.asarray(indices)
        return SampleSet(
            knee_ids=[self.knee_ids[i] for i in indices],
            labels=self.labels[indices],
            slices={v: arr[indices] for v, arr in self.slices.items()},
        )


@dataclass
class FoldData:
    train: SampleSet
    val: SampleSet


@dataclass
class Snapshot:
    epoch: int
    state: dict
    val_ap: float


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_ap: float
    val_auc: float


def _rng(seed, *key):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))))


def _augment_batch(samples, views, rng, policy):
    """samples: dict view -> (B, k, H, W) uint8 -> float32 in [0, 1]."""
    out = {}
    for v in views:
        arr = samples[v]
        if policy.is_identity:
            out[v] = arr.astype(np.float32) / 255.0
            continue
        stacked = np.empty_like(arr)
        for i in range(arr.shape[0]):
            stacked[i] = augment(SliceStack(v, arr[i]), rng, policy).slices
        out[v] = stacked.astype(np.float32) / 255.0
    return out


def predict_proba_batched(graph: ModelGraph, sample_set: SampleSet, batch_size=16):
    """Eval-mode class probabilities over a whole sample set."""
    views = graph.config.views
    n = len(sample_set)
    probs = np.zeros((n, graph.config.num_classes), dtype=np.float64)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        batch = {v: sample_set.slices[v][sl].astype(np.float32) / 255.0 for v in views}
        if len(views) == 1:
            probs[sl] = graph.predict_proba(batch[views[0]])
        else:
            probs[sl] = graph.predict_proba(batch)
    return probs


def _validation_metrics(graph, val_set):
    probs = predict_proba_batched(graph, val_set)
    scores = pool_progression(probs)
    binary = (val_set.labels > 0).astype(int)
    return average_precision(scores, binary), roc_auc(scores, binary)


def train_fold(model_cfg: ModelConfig, data: FoldData, fold_index, train_cfg: TrainConfig):
    """Train one fold to completion; returns (snapshot, history, graph).

    Pure function of (config, data, seed): every random stream (epoch
    resampling, augmentation, dropout, batch order) derives from the config
    seed and the fold index. The retained snapshot is the epoch with the
    highest validation average precision seen so far.
    """
    train_cfg.validate()
    graph = build_model(model_cfg, seed=train_cfg.seed * 1000 + fold_index)
    named = [(name, p.tensor) for name, p in graph.module.named_parameters()]
    adam = AdamState()
    views = model_cfg.views
    train, val = data.train, data.val

    history = []
    snapshot = None
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_schedule(epoch, train_cfg)
            resample_rng = _rng(train_cfg.seed, fold_index, epoch, 0)
            aug_rng = _rng(train_cfg.seed, fold_index, epoch, 1)
            drop_rng = _rng(train_cfg.seed, fold_index, epoch, 2)
            epoch_idx = resample_balance(np.arange(len(train)), train.labels, resample_rng)

            losses = []
            ctx = Ctx(training=True, rng=drop_rng)
            for start in range(0, len(epoch_idx), train_cfg.batch_size):
                idx = epoch_idx[start:start + train_cfg.batch_size]
                batch = train.subset(idx)
                inputs = _augment_batch(batch.slices, views, aug_rng, train_cfg.augment_policy)
                x = inputs if len(views) > 1 else inputs[views[0]]
                logits = graph.forward(x, ctx)
                probs = ag.softmax(logits, axis=-1)
                loss = focal_loss(probs, batch.labels, train_cfg.focal_gamma)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                for _, tensor in named:
                    tensor.grad = None
                ag.backward(loss)
                if train_cfg.grad_clip is not None:
                    _clip_gradients(named, train_cfg.grad_clip)
                adam_step(named, adam, lr, train_cfg.weight_decay)
                losses.append(loss.item())

            val_ap, val_auc = _validation_metrics(graph, val)
            history.append(EpochStats(epoch, lr, float(np.mean(losses)), val_ap, val_auc))
            if snapshot is None or val_ap > snapshot.val_ap:
                snapshot = Snapshot(epoch=epoch,
                                    state={k: v.copy() for k, v in graph.state_dict().items()},
                                    val_ap=val_ap)
    except DivergenceError as exc:
        exc.history = history  # keep the partial record for post-mortems
        raise
    return snapshot, history, graph


def _clip_gradients(named, max_norm):
    total = np.sqrt(sum(float(np.sum(np.square(t.grad)))
                        for _, t in named if t.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, t in named:
            if t.grad is not None:
                t.grad = t.grad * scale


def history_to_csv(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lr,train_loss,val_ap,val_auc\n")
        for h in history:
            fh.write(f"{h.epoch},{h.lr!r},{h.train_loss!r},{h.val_ap!r},{h.val_auc!r}\n")
