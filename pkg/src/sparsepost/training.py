"""Masked point estimation: SGD with momentum, weight decay, and the
learning-rate schedulers used throughout the pipelines.

Every update is projected back into the mask, momentum buffer included, so
pruned coordinates never accumulate hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .network import Minibatch, NetworkSpec, ParamVector, backward, forward, nll_loss
from .streams import derive_rng

if TYPE_CHECKING:
    from .masking import SparsityMask
    from .store import Dataset

CONSTANT = "constant"
MULTISTEP = "multistep"
COSINE = "cosine"


@dataclass(frozen=True)
class SchedulerSpec:
    """Learning-rate schedule: constant, multistep decay, or cosine."""

    kind: str = CONSTANT
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    initial: float = 0.0
    final: float = 0.0

    def __post_init__(self):
        if self.kind not in (CONSTANT, MULTISTEP, COSINE):
            raise ConfigError(f"unknown scheduler kind {self.kind!r}")
        if self.kind == MULTISTEP:
            if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
                raise ConfigError("milestones must be strictly increasing")
            if not 0.0 < self.gamma <= 1.0:
                raise ConfigError("gamma must lie in (0, 1]")

    @classmethod
    def constant(cls) -> "SchedulerSpec":
        return cls(CONSTANT)

    @classmethod
    def multistep(cls, milestones, gamma: float) -> "SchedulerSpec":
        return cls(MULTISTEP, milestones=tuple(int(m) for m in milestones), gamma=gamma)

    @classmethod
    def cosine(cls, initial: float, final: float) -> "SchedulerSpec":
        return cls(COSINE, initial=initial, final=final)


def lr_at(scheduler: SchedulerSpec, base_lr: float, epoch: int, total_epochs: int) -> float:
    """Learning rate in force during ``epoch`` (0-based)."""
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if scheduler.kind == CONSTANT:
        return base_lr
    if scheduler.kind == MULTISTEP:
        drops = sum(1 for m in scheduler.milestones if m <= epoch)
        return base_lr * scheduler.gamma**drops
    return scheduler.final + 0.5 * (scheduler.initial - scheduler.final) * (
        1.0 + math.cos(math.pi * epoch / total_epochs)
    )


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 128
    scheduler: SchedulerSpec = SchedulerSpec()
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index blocks covering all n points once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def sgd_train(
    net: NetworkSpec,
    params0: ParamVector,
    mask: Optional["SparsityMask"],
    dataset: "Dataset",
    config: SGDConfig,
) -> tuple[ParamVector, list[float]]:
    """SGD with momentum and weight decay inside a fixed mask.

    Returns the final parameters and a per-epoch mean-minibatch-loss trace.
    The data order is reshuffled every epoch from a stream derived off
    ``config.seed``, so a fixed seed gives a bit-identical run.
    """
    x, y = dataset.features, dataset.labels
    if x.shape[1] != net.input_dim:
        raise ShapeError("dataset feature width does not match the network")
    bits = None if mask is None else mask.bits
    theta = params0.values.copy() if bits is None else params0.values * bits
    velocity = np.zeros_like(theta)
    pvec = ParamVector(theta, net.layout())
    trace: list[float] = []
    for epoch in range(config.epochs):
        lr = lr_at(config.scheduler, config.learning_rate, epoch, config.epochs)
        rng = derive_rng(config.seed, "data-shuffle", epoch)
        losses = []
        for b, idx in enumerate(epoch_batches(x.shape[0], config.batch_size, rng)):
            batch = Minibatch(x[idx], y[idx])
            try:
                logits, cache = forward(net, pvec, mask, batch)
                loss, dlogits = nll_loss(logits, batch.labels)
                if not math.isfinite(loss):
                    raise NumericError("non-finite loss")
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}, batch {b}: {e}") from e
            grad = backward(net, pvec, mask, cache, dlogits)
            velocity = config.momentum * velocity + (grad.values + config.weight_decay * theta)
            if bits is not None:
                velocity *= bits
            theta = theta - lr * velocity
            if bits is not None:
                theta *= bits
            pvec = ParamVector(theta, net.layout())
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return pvec, trace
