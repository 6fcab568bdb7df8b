"""Initialization, loss, Nesterov SGD, the step learning-rate schedule,
finite-difference gradient checking and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, NumericError, StateError
from .graph import ModelGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    total_epochs: int = 320
    drop_epochs: tuple[int, ...] = (150, 225)
    drop_factor: float = 10.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        d = tuple(self.drop_epochs)
        if any(b <= a for a, b in zip(d, d[1:])) or (d and d[-1] >= self.total_epochs):
            raise ConfigurationError("drop_epochs must increase strictly and stay below total_epochs")


@dataclass
class OptimState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0


def xavier_init(shape, rng_seed=0, groups: int = 1, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform samples for a conv ``(out, in/g, kh, kw)`` or FC
    ``(in, out)`` weight.  ``rng_seed`` may be an int or a Generator."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    shape = tuple(shape)
    if len(shape) == 4:
        out, in_g, kh, kw = shape
        fan_in = kh * kw * in_g
        fan_out = kh * kw * out // groups
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ConfigurationError(f"xavier_init: unsupported weight rank {len(shape)}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def initialize(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> None:
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape in graph.slots.items():
        node_id, slot = key.rsplit(".", 1)
        node = graph.by_id[node_id]
        if slot == "weight":
            groups = node.conv.groups if node.kind in ("conv", "dwconv") else 1
            params[key] = xavier_init(shape, rng, groups=groups, dtype=dtype)
        elif slot in ("gamma", "running_var"):
            params[key] = np.ones(shape, dtype)
        else:
            params[key] = np.zeros(shape, dtype)
    graph.params = params


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / n``."""
    logits = np.asarray(logits)
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1
    return loss, probs / n


def nag_step(params, grads, state: OptimState, cfg: OptimConfig, lr: float) -> None:
    """In-place Nesterov update (lookahead-free form).

    ``g' = g + wd*theta``; ``v = mu*v + g'``; ``theta -= lr*(g' + mu*v)``.
    """
    mu, wd = cfg.momentum, cfg.weight_decay
    for key, g in grads.items():
        theta = params[key]
        if g.shape != theta.shape:
            raise StateError(f"{key}: gradient shape {g.shape} != parameter shape {theta.shape}")
        g = g + wd * theta if wd else g
        v = state.velocity.get(key)
        if v is None:
            v = state.velocity[key] = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise StateError(f"{key}: velocity shape {v.shape} != parameter shape {theta.shape}")
        v *= mu
        v += g
        theta -= (lr * (g + mu * v)).astype(theta.dtype, copy=False)


def lr_at_epoch(epoch: int, cfg: OptimConfig = OptimConfig()) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    drops = sum(1 for d in cfg.drop_epochs if epoch >= d)
    return cfg.lr0 / cfg.drop_factor**drops


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    per_kind: dict[str, float]  # max relative error per probed group
    samples: dict[str, int]
    worst: tuple[str, float] = ("", 0.0)

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    graph: ModelGraph,
    x: np.ndarray,
    labels: np.ndarray,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
    mode: str = "training",
    kernel: str = "gemm",
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Probes up to ``samples`` random learnable entries per layer kind plus
    ``samples`` input entries.  The graph must hold float64 parameters.
    Running statistics are left untouched.
    """
    if graph.dtype != np.float64 or x.dtype != np.float64:
        raise ConfigurationError("grad_check needs float64 parameters and input")
    rng = np.random.default_rng(seed)

    def loss_of() -> float:
        out, _ = graph.run(x, mode, kernel, update_running=False)
        value, _ = softmax_xent(out.reshape(len(x), -1), labels)
        if not math.isfinite(value):
            raise NumericError("non-finite loss during gradient check")
        return value

    out, tape = graph.run(x, mode, kernel, keep_context=True, update_running=False)
    loss, dlogits = softmax_xent(out.reshape(len(x), -1), labels)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss during gradient check")
    pgrads, xgrad = graph.backward(tape, dlogits)

    groups: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for key in graph.learnable_keys():
        kind = graph.by_id[key.rsplit(".", 1)[0]].kind
        groups.setdefault(kind, []).append((graph.params[key], pgrads[key]))
    groups["input"] = [(x, xgrad)]

    per_kind, counts = {}, {}
    worst = ("", 0.0)
    for kind, pairs in groups.items():
        offsets = np.cumsum([0] + [a.size for a, _ in pairs])
        pick = rng.choice(offsets[-1], size=min(samples, offsets[-1]), replace=False)
        errs = []
        for flat in pick:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            arr, g = pairs[which]
            idx = np.unravel_index(flat - offsets[which], arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_of()
            arr[idx] = orig - step
            down = loss_of()
            arr[idx] = orig
            numeric = (up - down) / (2 * step)
            errs.append(relative_error(float(g[idx]), numeric))
        per_kind[kind] = max(errs)
        counts[kind] = len(pick)
        if per_kind[kind] >= worst[1]:
            worst = (kind, per_kind[kind])
    return GradCheckReport(tolerance, per_kind, counts, worst)


# -- training loop ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    wall_time_s: float


def train_step(graph, x, y, state, cfg, lr, kernel="gemm") -> tuple[float, int]:
    out, tape = graph.run(x, "training", kernel, keep_context=True)
    logits = out.reshape(len(x), -1)
    loss, dlogits = softmax_xent(logits, y)
    correct = int((logits.argmax(axis=1) == y).sum())
    if not math.isfinite(loss):
        return loss, correct
    grads, _ = graph.backward(tape, dlogits.astype(out.dtype, copy=False))
    nag_step(graph.params, grads, state, cfg, lr)
    return loss, correct


def fit(
    graph: ModelGraph,
    dataset,
    cfg: OptimConfig = OptimConfig(),
    epochs: int = 1,
    rng_seed: int = 0,
    kernel: str = "gemm",
    lr_override: float | None = None,
    state: OptimState | None = None,
    on_epoch=None,
) -> list[EpochRecord]:
    """Mini-batch NAG training with per-epoch loss/accuracy records.

    ``dataset`` needs ``images`` and ``labels`` arrays.  Raises NumericError
    naming epoch and step if the loss stops being finite.
    """
    images, labels = dataset.images, dataset.labels
    if len(images) == 0:
        raise DataError("cannot fit on an empty dataset")
    if cfg.batch_size < 2:
        raise ConfigurationError("batch statistics need batch_size >= 2")
    if not graph.initialized:
        raise StateError("graph parameters are not initialized")
    rng = np.random.default_rng(rng_seed)
    state = state or OptimState()
    records = []
    for e in range(epochs):
        t0 = time.perf_counter()
        lr = lr_override if lr_override is not None else lr_at_epoch(state.epoch, cfg)
        order = rng.permutation(len(images))
        total_loss, total_correct = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:  # batch statistics need two samples
                continue
            x = images[idx].astype(graph.dtype, copy=False)
            loss, correct = train_step(graph, x, labels[idx], state, cfg, lr, kernel)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {state.epoch}, step {step}")
            total_loss += loss * len(idx)
            total_correct += correct
        seen = len(order) - (len(order) % cfg.batch_size == 1)
        rec = EpochRecord(state.epoch, lr, total_loss / seen, total_correct / seen, time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d lr %.4g loss %.4f acc %.4f", rec.epoch, lr, rec.train_loss, rec.train_acc)
        if on_epoch is not None:
            on_epoch(rec)
        state.epoch += 1
    return records


def evaluate(graph: ModelGraph, images: np.ndarray, labels: np.ndarray, batch: int = 256, kernel: str = "gemm") -> float:
    """Top-1 accuracy in inference mode."""
    correct = 0
    for start in range(0, len(images), batch):
        x = images[start : start + batch].astype(graph.dtype, copy=False)
        logits = graph.forward(x, "inference", kernel)
        correct += int((logits.argmax(axis=1) == labels[start : start + batch]).sum())
    return correct / len(images)
