"""Training engine: losses, Adam/SGD, learning-rate policies, freezing and
per-layer learning-rate multipliers."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .. import capsnet
from ..errors import ContractError, NumericError
from ..tensor import Tape, Tensor, cross_entropy
from .graph import ModelGraph, accuracy, run

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LRSchedule:
    """``constant``, ``exponential_decay`` or ``cyclical`` (triangular) policy."""

    kind: str = "constant"
    lr: float = 1e-3
    rate_per_epoch: float = 0.95
    base_lr: float = 1e-3
    max_lr: float = 6e-3
    step_size: int = 4

    def __post_init__(self):
        if self.kind not in ("constant", "exponential_decay", "cyclical"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cyclical":
            if not 0 < self.base_lr <= self.max_lr:
                raise ContractError("cyclical schedule needs 0 < base_lr <= max_lr")
            if self.step_size < 1:
                raise ContractError("cyclical step_size must be >= 1")
        elif self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.kind == "exponential_decay" and self.rate_per_epoch <= 0:
            raise ContractError("decay rate must be positive")

    @classmethod
    def constant(cls, lr: float) -> "LRSchedule":
        return cls("constant", lr=lr)

    @classmethod
    def exponential(cls, lr: float, rate_per_epoch: float = 0.95) -> "LRSchedule":
        return cls("exponential_decay", lr=lr, rate_per_epoch=rate_per_epoch)

    @classmethod
    def cyclical(cls, base_lr: float, max_lr: float, step_size: int) -> "LRSchedule":
        return cls("cyclical", base_lr=base_lr, max_lr=max_lr, step_size=step_size)

    @classmethod
    def parse(cls, text: str) -> "LRSchedule":
        """``const:LR``, ``exp:LR:RATE`` or ``cyclical:BASE:MAX:STEP``."""
        parts = text.strip().split(":")
        try:
            if parts[0] in ("const", "constant") and len(parts) == 2:
                return cls.constant(float(parts[1]))
            if parts[0] in ("exp", "exponential", "exponential_decay") and len(parts) in (2, 3):
                return cls.exponential(float(parts[1]), float(parts[2]) if len(parts) == 3 else 0.95)
            if parts[0] in ("cyclical", "clr") and len(parts) == 4:
                return cls.cyclical(float(parts[1]), float(parts[2]), int(parts[3]))
        except ValueError as exc:
            raise ContractError(f"bad learning-rate policy {text!r}: {exc}") from None
        raise ContractError(f"bad learning-rate policy {text!r}")

    def describe(self) -> str:
        if self.kind == "constant":
            return f"const:{self.lr}"
        if self.kind == "exponential_decay":
            return f"exp:{self.lr}:{self.rate_per_epoch}"
        return f"cyclical:{self.base_lr}:{self.max_lr}:{self.step_size}"


def lr_at(schedule: LRSchedule, step: int) -> float:
    if step < 0:
        raise ContractError("step must be non-negative")
    if schedule.kind == "constant":
        return schedule.lr
    if schedule.kind == "exponential_decay":
        return schedule.lr * schedule.rate_per_epoch ** step
    cycle = math.floor(1 + step / (2 * schedule.step_size))
    x = abs(step / schedule.step_size - 2 * cycle + 1)
    return schedule.base_lr + (schedule.max_lr - schedule.base_lr) * max(0.0, 1.0 - x)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    schedule: LRSchedule = field(default_factory=lambda: LRSchedule.constant(1e-3))
    batch_size: int = 32
    epochs: int = 50
    freeze_mask: frozenset = frozenset()
    group_lr_multipliers: dict = field(default_factory=dict)
    loss: str = "cross_entropy"
    reconstruction_weight: float = capsnet.RECONSTRUCTION_WEIGHT
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    # "epoch": the schedule advances once per epoch; "batch": once per update
    schedule_unit: str = "epoch"

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("cross_entropy", "capsule_margin"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be positive")
        if self.reconstruction_weight < 0:
            raise ContractError("reconstruction_weight must be non-negative")
        if self.schedule_unit not in ("epoch", "batch"):
            raise ContractError("schedule_unit must be 'epoch' or 'batch'")
        object.__setattr__(self, "freeze_mask", frozenset(int(i) for i in self.freeze_mask))
        object.__setattr__(self, "group_lr_multipliers",
                           {int(k): float(v) for k, v in dict(self.group_lr_multipliers).items()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.describe()
        d["freeze_mask"] = sorted(self.freeze_mask)
        d["group_lr_multipliers"] = {str(k): v for k, v in sorted(self.group_lr_multipliers.items())}
        return d


def differential_multipliers(num_layers: int, groups: int = 3, ratio: float = 3.0) -> dict:
    """Split layers into ``groups`` contiguous groups; earlier groups get ``ratio``-fold smaller rates."""
    bounds = np.array_split(np.arange(num_layers), groups)
    out = {}
    for g, idx in enumerate(bounds):
        for i in idx:
            out[int(i)] = float(ratio ** -(groups - 1 - g))
    return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    lr: float


class _Optimizer:
    def __init__(self, config: TrainConfig):
        self.cfg = config
        self.state = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.t += 1
        cfg = self.cfg
        for name, g in grads.items():
            lr = lrs[name]
            p = params[name]
            if cfg.optimizer == "adam":
                m, v = self.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                self.state[name] = (m, v)
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                update = mhat / (np.sqrt(vhat) + cfg.adam_eps)
            else:
                buf = self.state.get(name)
                buf = g if buf is None else cfg.momentum * buf + g
                self.state[name] = buf
                update = buf
            if lr != 0:
                p.data = (p.data - np.float32(lr) * update).astype(np.float32)


def _loss(model, res, images, labels, config) -> Tensor:
    n = images.shape[0]
    if config.loss == "cross_entropy":
        return cross_entropy(res.logits, labels) / n
    loss = capsnet.margin_loss(res.output, labels)
    if res.reconstruction is not None and config.reconstruction_weight > 0:
        target = Tensor._wrap(images.reshape(n, -1))
        loss = loss + capsnet.reconstruction_loss(res.reconstruction, target, config.reconstruction_weight)
    return loss / n


def train(model: ModelGraph, train_set, config: TrainConfig, val_set=None,
          on_epoch: Callable[[EpochRecord], None] | None = None):
    """Train a copy of ``model``; returns ``(trained_model, history)``.

    Frozen layers are never watched, so their parameters stay bit-identical.
    """
    if len(train_set) == 0:
        raise ContractError("cannot train on an empty dataset")
    if train_set.labels.max() >= model.class_count or train_set.labels.min() < 0:
        raise ContractError("dataset labels exceed the model class count")
    if config.loss == "capsule_margin" and model.capsule_layer() is None:
        raise ContractError("capsule_margin loss needs a capsule model")
    model = model.copy()
    names = model.trainable_names(config.freeze_mask)
    layer_of = {n: int(n.split(".", 1)[0]) for n in names}
    rng = np.random.default_rng(config.seed)
    opt = _Optimizer(config)
    decode = config.loss == "capsule_margin" and config.reconstruction_weight > 0 \
        and bool(model.decoder_layers())
    n = len(train_set)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        epoch_lr = lr_at(config.schedule, epoch if config.schedule_unit == "epoch" else step)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            images = train_set.images[idx]
            labels = train_set.labels[idx]
            base_lr = lr_at(config.schedule, epoch if config.schedule_unit == "epoch" else step)
            with Tape() as tape:
                params = [model.params[k] for k in names]
                tape.watch(*params)
                res = run(model, Tensor._wrap(images), training=True, rng=rng,
                          labels=labels if decode else None, decode=decode)
                loss = _loss(model, res, images, labels, config)
                value = loss.item()
                if not math.isfinite(value):
                    err = NumericError(f"non-finite loss at epoch {epoch}, step {step}")
                    err.step = step
                    raise err
                grads = dict(zip(names, tape.gradient(loss, params)))
            lrs = {k: base_lr * config.group_lr_multipliers.get(layer_of[k], 1.0) for k in names}
            opt.step(model.params, grads, lrs)
            for p in model.params.values():
                p.node_id, p._tape = None, None
            total_loss += value * len(idx)
            correct += int(np.sum(np.argmax(res.output.data, axis=-1) == labels))
            step += 1
        val_acc = accuracy(model, val_set.images, val_set.labels) if val_set is not None and len(val_set) else float("nan")
        rec = EpochRecord(epoch, total_loss / n, correct / n, val_acc, epoch_lr)
        history.append(rec)
        logger.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f lr %.6g",
                    epoch, rec.loss, rec.train_acc, rec.val_acc, rec.lr)
        if on_epoch is not None:
            on_epoch(rec)
    return model, history

