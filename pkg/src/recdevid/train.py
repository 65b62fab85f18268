"""Loss, Adam, learning-rate schedule, the training loop, evaluation and
transfer fine-tuning."""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .layers import Module
from .metrics import MetricsReport, confusion_matrix
from .model import ConfigError, DeviceIdModel
from .tensor import Tensor

PROB_FLOOR = 1e-12


class TrainingDivergence(FloatingPointError):
    """Loss or gradient became non-finite; the model holds its last good weights."""


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, target) -> float:
    """-log p[target] with a probability floor; a batch gives the mean."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.atleast_1d(np.asarray(target))
    p2 = p.reshape(-1, p.shape[-1])
    if t.shape[0] != p2.shape[0]:
        raise ValueError("one target per probability row required")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= p2.shape[1]:
        raise ValueError(f"target index outside 0..{p2.shape[1] - 1}")
    picked = p2[np.arange(p2.shape[0]), t]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of softmax(logits) as one taped op.

    The gradient is ``(p - onehot) / B`` except where the floor is active,
    where the loss is flat in the logits.
    """
    if logits.ndim != 2:
        raise T.ShapeError(f"logits must be (B, K), got {logits.shape}")
    b, k = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (b,) or (b and (t.min() < 0 or t.max() >= k)):
        raise ValueError(f"targets must be {b} indices in 0..{k - 1}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    picked = p[np.arange(b), t]
    active = picked > PROB_FLOOR
    loss = np.mean(-np.log(np.maximum(picked, PROB_FLOOR)))

    def bw(g):
        grad = p.copy()
        grad[np.arange(b), t] -= 1.0
        grad *= active[:, None] * (float(g) / b)
        return (grad.astype(logits.dtype),)
    return T.make_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_xent")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrs = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros(a.shape, dtype=np.float64) for a in arrs],
                   [np.zeros(a.shape, dtype=np.float64) for a in arrs])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None) -> None:
    """In-place bias-corrected Adam update.  ``params`` are Tensors or arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state differ in length")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingDivergence(f"non-finite gradient in parameter {label} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        arr = p.data if isinstance(p, Tensor) else p
        if g.shape != arr.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {arr.shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g, dtype=np.float64)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        arr -= update.astype(arr.dtype)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    decay_factor: float = 0.1
    decay_period: int = 30
    seed: int = 0
    split: tuple = (0.64, 0.16, 0.20)

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_period < 1:
            raise ConfigError("batch_size, decay_period must be >= 1 and epochs >= 0")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three nonnegative fractions summing to 1, got {self.split}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d).validate()


PRESETS = {
    "paper": TrainConfig(),
    "transfer": TrainConfig(lr=1e-5, batch_size=32, epochs=300),
    "desk": TrainConfig(lr=1e-3, batch_size=32, epochs=30),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides).validate()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_period)


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------

def stratified_split(labels, fractions, seed: int):
    """Per-class seeded shuffle, then cut into (train, val, test) index arrays."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    _, val_frac, test_frac = fractions
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(idx.size * test_frac))
        n_val = int(round(idx.size * val_frac))
        parts[2].append(idx[:n_test])
        parts[1].append(idx[n_test:n_test + n_val])
        parts[0].append(idx[n_test + n_val:])
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)


@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, **row) -> None:
        self.rows.append(row)

    COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: Module
    history: History
    splits: tuple
    steps: int


def _batched_logits(model: Module, x: np.ndarray, batch: int, threads: int = 1) -> np.ndarray:
    # chunk boundaries do not depend on ``threads``, so neither do the results
    prev = model.training
    model.eval()
    chunks = [x[i:i + batch] for i in range(0, len(x), batch)]
    try:
        with T.no_grad():
            run = lambda c: model(Tensor(c)).data  # noqa: E731
            if threads > 1 and len(chunks) > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    outs = list(pool.map(run, chunks))
            else:
                outs = [run(c) for c in chunks]
    finally:
        model.train(prev)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, 0))


def predict_logits(model: Module, x, batch: int = 64) -> np.ndarray:
    x = np.asarray(x, dtype=T.get_default_dtype())
    if x.ndim == 2:
        return _batched_logits(model, x[None], batch)[0]
    return _batched_logits(model, x, batch)


def _snapshot(model: Module) -> dict:
    state = {n: p.data.copy() for n, p in model.named_parameters()}
    state.update({"buffer:" + n: b.copy() for n, b in model.named_buffers()})
    return state


def _restore(model: Module, state: dict) -> None:
    for n, p in model.named_parameters():
        p.data = state[n].copy()
    for n, _ in model.named_buffers():
        model.set_buffer(n, state["buffer:" + n])


def train(model: Module, features, labels, cfg: TrainConfig, splits=None, trainable=None,
          max_steps: int | None = None, log=None) -> TrainResult:
    """Minibatch Adam on the training split; best validation weights are kept.

    ``trainable`` (parameter names) freezes everything else.  ``max_steps``
    caps the total number of optimiser steps.  Selection is by validation
    accuracy, ties broken by lower validation loss; without a validation split
    the final weights are kept.
    """
    cfg.validate()
    x = np.asarray(features, dtype=T.get_default_dtype())
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ConfigError("features and labels differ in count")
    tr, va, te = splits if splits is not None else stratified_split(y, cfg.split, cfg.seed)
    if len(tr) == 0:
        raise ConfigError("training split is empty")
    named = list(model.named_parameters())
    if trainable is not None:
        unknown = set(trainable) - {n for n, _ in named}
        if unknown:
            raise ConfigError(f"unknown trainable parameters {sorted(unknown)}")
        named = [(n, p) for n, p in named if n in set(trainable)]
    keep = {id(p) for _, p in named}
    frozen = [p for _, p in model.named_parameters() if id(p) not in keep]
    saved_flags = [(p, p.requires_grad) for p in frozen]
    for p in frozen:
        p.requires_grad = False
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    history = History()
    best = (_snapshot(model), -1.0, math.inf)
    steps = 0
    try:
        model.train()
        for epoch in range(cfg.epochs):
            if max_steps is not None and steps >= max_steps:
                break
            lr = lr_schedule(epoch, cfg)
            order = tr[rng.permutation(len(tr))]
            loss_sum, correct, seen = 0.0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                if max_steps is not None and steps >= max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                for p in params:
                    p.grad = None
                logits = model(Tensor(x[idx]))
                loss = softmax_cross_entropy(logits, y[idx])
                lval = float(loss.data)
                if not math.isfinite(lval):
                    _restore(model, best[0])
                    raise TrainingDivergence(f"loss became {lval} at epoch {epoch}, step {steps + 1}")
                T.backward(loss)
                try:
                    adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.eps, names)
                except TrainingDivergence:
                    _restore(model, best[0])
                    raise
                steps += 1
                loss_sum += lval * len(idx)
                correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
                seen += len(idx)
            if seen == 0:
                break
            row = dict(epoch=epoch, lr=lr, train_loss=loss_sum / seen, train_acc=correct / seen,
                       val_loss=float("nan"), val_acc=float("nan"))
            if len(va):
                vl = _batched_logits(model, x[va], cfg.batch_size)
                row["val_loss"] = cross_entropy(softmax(vl), y[va])
                row["val_acc"] = float((vl.argmax(axis=1) == y[va]).mean())
                if (row["val_acc"], -row["val_loss"]) > (best[1], -best[2]):
                    best = (_snapshot(model), row["val_acc"], row["val_loss"])
                    history.best_epoch = epoch
            history.append(**row)
            if log is not None:
                log(row)
        if len(va) and history.best_epoch is not None:
            _restore(model, best[0])
    finally:
        for p, flag in saved_flags:
            p.requires_grad = flag
        for p in params:
            p.grad = None
        model.eval()
    return TrainResult(model, history, (tr, va, te), steps)


def evaluate(model: Module, features, labels, n_classes: int | None = None, batch: int = 64,
             threads: int = 1) -> MetricsReport:
    x = np.asarray(features, dtype=T.get_default_dtype())
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = model.config.n_classes
    if len(x) == 0:
        return MetricsReport(np.zeros((n_classes, n_classes), dtype=np.int64))
    logits = _batched_logits(model, x, batch, threads)
    return MetricsReport(confusion_matrix(y, logits.argmax(axis=1), n_classes))


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

TRAINABLE_SETS = {
    "head_only": ("out",),
    "mlp_and_head": ("mlp", "out"),
}


class _CachedHead(Module):
    """The MLP and output layer of a model, fed with precomputed body features."""

    def __init__(self, model: DeviceIdModel):
        super().__init__()
        self.config = model.config
        self.add_module("mlp", model.mlp)
        self.add_module("out", model.out)

    def forward(self, feats: Tensor) -> Tensor:
        return self.out(self.mlp(feats))


def body_features(model: DeviceIdModel, features, batch: int = 64) -> np.ndarray:
    x = np.asarray(features, dtype=T.get_default_dtype())
    prev = model.training
    model.eval()
    try:
        with T.no_grad():
            return np.concatenate([model.body(Tensor(x[i:i + batch])).data for i in range(0, len(x), batch)])
    finally:
        model.train(prev)


@dataclass
class TransferResult:
    model: DeviceIdModel
    report: MetricsReport
    train: TrainResult
    frozen_unchanged: bool
    trainable: list


def transfer_finetune(pretrained, features, labels, n_classes: int, trainable: str = "head_only",
                      cfg: TrainConfig | None = None, max_steps: int | None = None, log=None) -> TransferResult:
    """Replace the output layer for ``n_classes``, freeze everything outside
    ``trainable`` and train on the new data.

    The body is frozen in both trainable sets, so its output is computed once
    (inference mode) and the head trains on those cached features.
    """
    if trainable not in TRAINABLE_SETS:
        raise ConfigError(f"trainable must be one of {sorted(TRAINABLE_SETS)}, got {trainable!r}")
    cfg = (cfg or preset("transfer")).validate()
    model = pretrained if isinstance(pretrained, DeviceIdModel) else load_checkpoint(pretrained)
    model.replace_head(n_classes, seed=cfg.seed)
    prefixes = tuple(p + "." for p in TRAINABLE_SETS[trainable])
    train_names = [n for n, _ in model.named_parameters() if n.startswith(prefixes)]
    before = {n: p.data.copy() for n, p in model.named_parameters() if n not in train_names}
    before.update({"buffer:" + n: b.copy() for n, b in model.named_buffers()})

    y = np.asarray(labels, dtype=np.int64)
    splits = stratified_split(y, cfg.split, cfg.seed)
    cached = body_features(model, features)
    head = _CachedHead(model)
    # the wrapper names its parameters exactly as the full model does
    result = train(head, cached, y, cfg, splits=splits, trainable=train_names, max_steps=max_steps, log=log)

    after = {n: p.data for n, p in model.named_parameters() if n not in train_names}
    after.update({"buffer:" + n: b for n, b in model.named_buffers()})
    unchanged = before.keys() == after.keys() and all(
        before[k].dtype == after[k].dtype and before[k].tobytes() == after[k].tobytes() for k in before)
    te = splits[2]
    report = evaluate(model, np.asarray(features)[te], y[te], n_classes)
    return TransferResult(model, report, result, unchanged, train_names)
