"""Sparse-substructure SGHMC and multi-chain orchestration.

The update rule, per minibatch step with friction ``eta`` and step size
``alpha``:

    r     <- (1 - eta) * r - alpha * grad_U + eps * sqrt(2 * eta * alpha)
    theta <- m . (theta + r)

with ``eps`` a fresh standard-normal draw per coordinate. The momentum is
projected into the mask as well, so pruned coordinates hold exact zeros at
every emission point. Gaussian noise is drawn for all K coordinates before
masking, which keeps the noise stream identical across masks with the same
seed.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .masking import MaskProvenance, SparsityMask, apply_mask
from .metrics import inll
from .network import (
    Minibatch,
    NetworkSpec,
    ParamVector,
    PriorConfig,
    init_params,
    stochastic_grad_U,
)
from .streams import chain_seed, derive_rng, derive_seed
from .training import SchedulerSpec, SGDConfig, epoch_batches, lr_at, sgd_train

if TYPE_CHECKING:
    from .store import Dataset


@dataclass(frozen=True)
class SGHMCConfig:
    step_size: float
    friction: float
    prior_precision: float = 0.0
    burn_in_epochs: int = 0
    num_samples: int = 1
    batch_size: int = 128
    samples_per_epoch: int = 1
    step_scheduler: SchedulerSpec = SchedulerSpec()
    noise_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError("step size must be positive")
        if not 0.0 < self.friction <= 1.0:
            raise ConfigError("friction must lie in (0, 1]")
        if self.prior_precision < 0:
            raise ConfigError("prior precision must be nonnegative")
        if self.burn_in_epochs < 0:
            raise ConfigError("burn-in epochs must be nonnegative")
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.samples_per_epoch < 1:
            raise ConfigError("samples_per_epoch must be >= 1")


@dataclass
class ChainGroup:
    """One chain's mask plus its S sampled active-value vectors."""

    mask: SparsityMask
    samples: np.ndarray  # (S, active_count) float64
    provenance: MaskProvenance
    sample_start_epoch: int = 0  # 1-based epoch of the first sample; 0 = unknown

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ShapeError("chain samples must be a (S, active) matrix")
        if self.samples.shape[1] != self.mask.active_count():
            raise ShapeError(
                f"samples store {self.samples.shape[1]} values per draw, "
                f"mask has {self.mask.active_count()} active coordinates"
            )

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    def dense_sample(self, s: int) -> np.ndarray:
        """Materialize sample ``s`` as a full K-length vector."""
        vec = np.zeros(len(self.mask))
        vec[self.mask.active_indices()] = self.samples[s]
        return vec


@dataclass
class PosteriorEnsemble:
    """Sampled posterior: per-chain masks and active values, with provenance."""

    net: NetworkSpec
    groups: list[ChainGroup] = field(default_factory=list)

    def __post_init__(self):
        for g in self.groups:
            if len(g.mask) != self.net.param_count:
                raise ShapeError("group mask length does not match the network")

    @property
    def num_chains(self) -> int:
        return len(self.groups)

    @property
    def total_samples(self) -> int:
        return sum(g.num_samples for g in self.groups)

    def sample_param_vector(self, chain: int, s: int) -> ParamVector:
        return ParamVector(self.groups[chain].dense_sample(s), self.net.layout())


def run_sghmc(
    grad_fn: Callable[[int, np.ndarray], np.ndarray],
    theta0: np.ndarray,
    mask_bits: Optional[np.ndarray],
    step_sizes: np.ndarray,
    friction: float,
    rng: np.random.Generator,
    noise_enabled: bool = True,
    on_step: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Run the SGHMC kernel for ``len(step_sizes)`` steps; returns final theta.

    ``grad_fn(step, theta)`` supplies the stochastic energy gradient. This is
    the single implementation of the update rule; the network-facing chain
    and the scalar sanity targets both go through it.
    """
    theta = theta0.astype(np.float64).copy()
    if mask_bits is not None:
        theta *= mask_bits
    r = np.zeros_like(theta)
    keep = 1.0 - friction
    for s, alpha in enumerate(step_sizes):
        g = grad_fn(s, theta)
        r = keep * r - alpha * g
        if noise_enabled:
            r += rng.standard_normal(theta.shape[0]) * math.sqrt(2.0 * friction * alpha)
        if mask_bits is not None:
            r *= mask_bits
        theta = theta + r
        if mask_bits is not None:
            theta *= mask_bits
        if on_step is not None:
            on_step(s, theta)
    return theta


def _emission_offsets(n_batches: int, per_epoch: int) -> list[int]:
    """Batch indices (0-based) after which a sample is emitted."""
    return [int(math.ceil(n_batches * j / per_epoch)) - 1 for j in range(1, per_epoch + 1)]


def sghmc_chain(
    net: NetworkSpec,
    theta0: ParamVector,
    mask: SparsityMask,
    dataset: "Dataset",
    config: SGHMCConfig,
    eval_set: Optional["Dataset"] = None,
) -> tuple[np.ndarray, list[float]]:
    """Sample one SGHMC chain inside ``mask``.

    Runs ``burn_in_epochs`` then keeps emitting ``samples_per_epoch`` evenly
    spaced samples per epoch until ``num_samples`` are collected. Samples are
    returned sparsely as an (S, active_count) matrix. If ``eval_set`` is
    given, also returns the instantaneous test NLL at every epoch end
    (burn-in included).
    """
    x, y = dataset.features, dataset.labels
    n = x.shape[0]
    n_batches = math.ceil(n / config.batch_size)
    if config.samples_per_epoch > n_batches:
        raise ConfigError(
            f"cannot emit {config.samples_per_epoch} samples per epoch from {n_batches} steps"
        )
    sampling_epochs = math.ceil(config.num_samples / config.samples_per_epoch)
    total_epochs = config.burn_in_epochs + sampling_epochs
    emit_at = set(_emission_offsets(n_batches, config.samples_per_epoch))

    bits = mask.bits
    active = mask.active_indices()
    prior = PriorConfig(config.prior_precision)
    theta = apply_mask(theta0, mask)
    noise_rng = derive_rng(config.seed, "sghmc-noise")
    layout = net.layout()

    step_sizes = np.repeat(
        [
            lr_at(config.step_scheduler, config.step_size, e, total_epochs)
            for e in range(total_epochs)
        ],
        n_batches,
    )
    samples = np.empty((config.num_samples, active.size))
    collected = 0
    trace: list[float] = []
    epoch_state = {"epoch": -1, "batches": []}

    def batches_for(epoch: int):
        if epoch_state["epoch"] != epoch:
            shuffle = derive_rng(config.seed, "data-shuffle", epoch)
            epoch_state["epoch"] = epoch
            epoch_state["batches"] = list(epoch_batches(n, config.batch_size, shuffle))
        return epoch_state["batches"]

    def grad_fn(step: int, values: np.ndarray) -> np.ndarray:
        idx = batches_for(step // n_batches)[step % n_batches]
        pv = ParamVector(values, layout)
        return stochastic_grad_U(net, pv, mask, Minibatch(x[idx], y[idx]), n, prior).values

    def on_step(step: int, values: np.ndarray) -> None:
        nonlocal collected
        epoch, b = divmod(step, n_batches)
        if (
            epoch >= config.burn_in_epochs
            and b in emit_at
            and collected < config.num_samples
        ):
            samples[collected] = values[active]
            collected += 1
        if b == n_batches - 1:
            if not np.all(np.isfinite(values)):
                raise NumericError(f"chain diverged during epoch {epoch}")
            if eval_set is not None:
                trace.append(inll(net, ParamVector(values, layout), mask, eval_set))

    run_sghmc(
        grad_fn,
        theta.values,
        bits,
        step_sizes,
        config.friction,
        noise_rng,
        noise_enabled=config.noise_enabled,
        on_step=on_step,
    )
    return samples, trace


def init_chain(
    net: NetworkSpec,
    mask: SparsityMask,
    dataset: "Dataset",
    sgd_config: SGDConfig,
    seed: int,
    warm_start: Optional[ParamVector] = None,
) -> ParamVector:
    """SGD-based chain initialization inside the mask.

    With a warm start (the final vector from a pruning run) training resumes
    from ``mask * warm_start``; otherwise from a fresh He-uniform init. The
    ``seed`` argument overrides the SGD config's seed so one value pins the
    whole initialization.
    """
    if warm_start is not None:
        start = apply_mask(warm_start, mask)
    else:
        start = apply_mask(init_params(net, derive_rng(seed, "init")), mask)
    if sgd_config.epochs == 0:
        return start
    cfg = dataclasses.replace(sgd_config, seed=derive_seed(seed, "init-sgd"))
    trained, _ = sgd_train(net, start, mask, dataset, cfg)
    return trained


def _run_one_chain(args) -> tuple[int, np.ndarray, list[float]]:
    (i, net, mask, dataset, cfg, init_sgd, warm_start, eval_set) = args
    seed_i = chain_seed(cfg.seed, i)
    cfg_i = dataclasses.replace(cfg, seed=seed_i)
    theta0 = init_chain(net, mask, dataset, init_sgd, seed_i, warm_start)
    samples, trace = sghmc_chain(net, theta0, mask, dataset, cfg_i, eval_set)
    return i, samples, trace


def parallel_chains(
    net: NetworkSpec,
    masks: list[SparsityMask],
    dataset: "Dataset",
    config: SGHMCConfig,
    total_budget: int,
    init_sgd: SGDConfig,
    provenances: Optional[list[MaskProvenance]] = None,
    warm_starts: Optional[list[Optional[ParamVector]]] = None,
    eval_set: Optional["Dataset"] = None,
    jobs: int = 1,
) -> tuple[PosteriorEnsemble, list[list[float]]]:
    """Run one chain per mask and merge the results into an ensemble.

    The sample budget is split evenly (an indivisible budget is a config
    error); chain i draws its seed as ``config.seed XOR i``, so the merged
    ensemble is reproducible and independent of execution order.
    """
    m = len(masks)
    if m < 1:
        raise ConfigError("need at least one mask")
    if total_budget % m != 0:
        raise ConfigError(f"sample budget {total_budget} not divisible by {m} chains")
    per_chain = total_budget // m
    cfg = dataclasses.replace(config, num_samples=per_chain)
    if provenances is None:
        provenances = [MaskProvenance(method="FULL", seed=config.seed)] * m
    if warm_starts is None:
        warm_starts = [None] * m
    work = [
        (i, net, masks[i], dataset, cfg, init_sgd, warm_starts[i], eval_set) for i in range(m)
    ]
    if jobs > 1 and m > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, m)) as pool:
            results = list(pool.map(_run_one_chain, work))
    else:
        results = [_run_one_chain(w) for w in work]
    results.sort(key=lambda t: t[0])
    start_epoch = config.burn_in_epochs + 1
    groups = [
        ChainGroup(masks[i], samples, provenances[i], sample_start_epoch=start_epoch)
        for i, samples, _ in results
    ]
    traces = [trace for _, _, trace in results]
    return PosteriorEnsemble(net, groups), traces
