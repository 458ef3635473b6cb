"""Adam and the epoch-based training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError
from .metrics import accuracy, dice
from .nn import DEFAULT_L1, DEFAULT_L2, regularization, softmax_cross_entropy
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 50
    batch_size: int = 32
    l1: float = DEFAULT_L1
    l2: float = DEFAULT_L2
    seed: int = 0
    patches_per_epoch: int = 4000
    test_patches: int = 500
    tumor_fraction: float = 0.5

    def __post_init__(self):
        for name in ("learning_rate", "epsilon", "batch_size", "patches_per_epoch", "test_patches"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "l1", "l2"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in (0, 1)")
        if not 0 <= self.tumor_fraction <= 1:
            raise ConfigurationError("tumor_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, config):
    """One Adam update, in place on ``params``.

    ``params`` and ``grads`` map names to arrays.  Non-finite gradients abort
    the step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, w in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        w -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)).astype(w.dtype)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l1: float
    l2: float
    dice: float
    accuracy: float


@dataclass
class TrainingLog:
    seed: int
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    best_dice: float | None = None
    best_state: dict | None = field(default=None, repr=False)
    halted: str | None = None

    def write(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list:
        return [EpochRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


class TrainingHalted(NumericError):
    def __init__(self, message, log: TrainingLog):
        super().__init__(message)
        self.log = log


def batch_loss(net, inputs, labels, dropout_rng=None, mode="train"):
    """Forward a batch and return ``(mean data loss, grad_logits)`` for the batch mean."""
    logits = net.forward(inputs, mode, dropout_rng, record=True)
    n = len(inputs)
    grad = np.empty_like(logits)
    total = 0.0
    for b in range(n):
        loss, grad[b] = softmax_cross_entropy(logits[b], labels[b])
        total += loss
    return total / n, grad / n


def predict_labels(net, inputs, batch_size=32):
    out = []
    for s in range(0, len(inputs), batch_size):
        out.append(np.argmax(net.forward(inputs[s:s + batch_size], "eval"), axis=1))
    return np.concatenate(out).astype(np.uint8)


def _as_arrays(samples):
    from .data.patches import stack_patches
    return stack_patches(samples)


def train(net, train_set, test_set, config: TrainConfig, out_dir=None) -> TrainingLog:
    """Train ``net`` in place.

    ``train_set`` / ``test_set`` are either lists of ``PatchSample`` (used as
    is; training reshuffles every epoch) or lists of patients to sample
    from.  Test patches are drawn once so every epoch is scored on the same
    set.  The best whole-tumor dice checkpoint is kept in the returned log
    and, with ``out_dir``, written to ``best.ckpt`` next to ``epoch<k>.ckpt``
    and ``log.jsonl``.
    """
    from .data.checkpoint import save_checkpoint
    from .data.patches import PatchSample, sample_patches

    if not train_set or not test_set:
        raise ConfigurationError("training and test sets must be non-empty")
    sampling = stream(config.seed, "sampling")
    dropout_rng = stream(config.seed, "dropout")
    fixed_train = isinstance(train_set[0], PatchSample)
    if fixed_train:
        train_x, train_y = _as_arrays(train_set)
    else:
        from .data.patches import load_patient, Patient
        train_set = [p if isinstance(p, Patient) else load_patient(p) for p in train_set]
    if isinstance(test_set[0], PatchSample):
        test_x, test_y = _as_arrays(test_set)
    else:
        test_x, test_y = _as_arrays(sample_patches(
            test_set, config.test_patches, config.tumor_fraction, stream(config.seed, "eval"),
            net.spec.input_patch, net.spec.output_patch))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    params = {name: p.value for name, p in net.registry.items()}
    grads = {name: p.grad for name, p in net.registry.items()}
    state = AdamState()
    history = TrainingLog(seed=config.seed)
    last_good = net.state()

    def halt(reason):
        net.load_state(last_good)
        history.halted = reason
        if out_dir is not None:
            save_checkpoint(net, out_dir / "last_good.ckpt", {"halted": reason})
            history.write(out_dir / "log.jsonl")
        raise TrainingHalted(reason, history)

    for epoch in range(config.epochs):
        if fixed_train:
            order = sampling.permutation(len(train_x))
            xs, ys = train_x[order], train_y[order]
        else:
            xs, ys = _as_arrays(sample_patches(
                train_set, config.patches_per_epoch, config.tumor_fraction, sampling,
                net.spec.input_patch, net.spec.output_patch))
        running = 0.0
        for s in range(0, len(xs), config.batch_size):
            xb, yb = xs[s:s + config.batch_size], ys[s:s + config.batch_size]
            try:
                loss, grad = batch_loss(net, xb, yb, dropout_rng)
            except NumericError as exc:
                halt(f"epoch {epoch}, batch starting at sample {s}: {exc}")
            if not np.isfinite(loss):
                halt(f"non-finite loss at epoch {epoch}, batch starting at sample {s}")
            net.backward(grad)
            regularization(net.parameters(), config.l1, config.l2, accumulate=True)
            try:
                adam_step(params, grads, state, config)
            except NumericError as exc:
                halt(f"epoch {epoch}: {exc}")
            running += loss * len(xb)
        l1, l2 = regularization(net.parameters())
        pred = predict_labels(net, test_x, config.batch_size)
        record = EpochRecord(epoch, running / len(xs), l1, l2, dice(pred, test_y), accuracy(pred, test_y))
        history.records.append(record)
        last_good = net.state()
        log.info("epoch %d loss %.5f dice %.4f acc %.4f", epoch, record.loss, record.dice, record.accuracy)
        improved = history.best_dice is None or record.dice > history.best_dice
        if improved:
            history.best_epoch, history.best_dice = epoch, record.dice
            history.best_state = net.state()
        if out_dir is not None:
            meta = {"epoch": epoch, "dice": record.dice, "accuracy": record.accuracy}
            save_checkpoint(net, out_dir / f"epoch{epoch}.ckpt", meta)
            if improved:
                save_checkpoint(net, out_dir / "best.ckpt", meta)
            history.write(out_dir / "log.jsonl")
    if out_dir is not None and not history.records:
        history.write(out_dir / "log.jsonl")
    return history
