"""Sparse substructure selection.

Two families: magnitude-based iterative pruning (with or without rewinding
the surviving weights to their initial values each round), and random masks
drawn either per layer or globally. Masks are binary vectors over the whole
flat parameter vector, biases included; sparsity rates are fractions of all
K parameters.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .network import LayerSlice, NetworkSpec, ParamVector, init_params
from .streams import derive_rng, derive_seed

IP = "IP"
IPR = "IPR"
RLM_IP = "RLM_IP"
RLM_IPR = "RLM_IPR"
RLM_F = "RLM_F"
RGM = "RGM"
FULL = "FULL"
MASK_METHODS = (IP, IPR, RLM_IP, RLM_IPR, RLM_F, RGM, FULL)


@dataclass(frozen=True)
class MaskProvenance:
    """How a mask came to be; recorded for every mask the system emits."""

    method: str
    seed: int
    source_iterations: Optional[int] = None

    def __post_init__(self):
        if self.method not in MASK_METHODS:
            raise ConfigError(f"unknown mask method {self.method!r}")


@dataclass
class SparsityMask:
    """Binary vector over all K parameters: 1 = active, 0 = pruned."""

    bits: np.ndarray
    offsets: Optional[tuple[LayerSlice, ...]] = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits)
        if self.bits.ndim != 1:
            raise ShapeError("mask bits must be 1-D")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ShapeError("mask bits must be 0 or 1")
        self.bits = self.bits.astype(np.uint8)

    def __len__(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def full(cls, net: NetworkSpec) -> "SparsityMask":
        return cls(np.ones(net.param_count, dtype=np.uint8), net.layout())

    def active_count(self) -> int:
        return int(self.bits.sum())

    def sparsity(self) -> float:
        return 1.0 - self.active_count() / len(self)

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def pack(self) -> bytes:
        """Little-endian bitset; LSB of byte 0 is coordinate 0."""
        return np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def unpack(cls, data: bytes, length: int, offsets=None) -> "SparsityMask":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[:length]
        return cls(bits, offsets)


@dataclass(frozen=True)
class PruneSchedule:
    """Fraction pruned per round, number of rounds, epochs per round."""

    per_iter_fraction: float
    iterations: int
    epochs_per_iteration: int

    def __post_init__(self):
        if not 0.0 < self.per_iter_fraction < 1.0:
            raise ConfigError("per_iter_fraction must lie in (0, 1)")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.epochs_per_iteration < 1:
            raise ConfigError("epochs_per_iteration must be >= 1")


@dataclass
class PruneStage:
    """Mask and parameter vector at the end of one pruning round."""

    mask: SparsityMask
    params: ParamVector
    train_trace: Optional[list[float]] = None


def apply_mask(params: ParamVector, mask: SparsityMask) -> ParamVector:
    """Hadamard product of parameters and mask."""
    if len(params) != len(mask):
        raise ShapeError("mask and parameter vector lengths differ")
    return ParamVector(params.values * mask.bits, params.offsets)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def prune_lowest_magnitude(
    params: ParamVector, mask: SparsityMask, fraction: float
) -> SparsityMask:
    """Zero the floor(fraction * active) smallest-magnitude active weights.

    Pruning is global across all layers. Already-pruned coordinates stay
    pruned; ties on magnitude prune the lowest flat index first.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("prune fraction must lie in [0, 1)")
    if len(params) != len(mask):
        raise ShapeError("mask and parameter vector lengths differ")
    active = mask.active_indices()
    if active.size < 1:
        raise UsageError("cannot prune a mask with no active coordinates")
    n_prune = int(math.floor(fraction * active.size))
    if n_prune == 0:
        return SparsityMask(mask.bits.copy(), mask.offsets)
    order = np.argsort(np.abs(params.values[active]), kind="stable")
    bits = mask.bits.copy()
    bits[active[order[:n_prune]]] = 0
    return SparsityMask(bits, mask.offsets)


def _run_prune_loop(net, data, schedule, train_config, seed, rewind):
    from .training import sgd_train

    theta0 = init_params(net, derive_rng(seed, "init"))
    mask = SparsityMask.full(net)
    stages = [PruneStage(mask, theta0.copy())]
    theta_start = theta0
    for it in range(1, schedule.iterations + 1):
        cfg = dataclasses.replace(
            train_config,
            epochs=schedule.epochs_per_iteration,
            seed=derive_seed(seed, "prune-round", it),
        )
        trained, trace = sgd_train(net, theta_start, mask, data, cfg)
        mask = prune_lowest_magnitude(trained, mask, schedule.per_iter_fraction)
        stage_params = apply_mask(trained, mask)
        stages.append(PruneStage(mask, stage_params, train_trace=trace))
        theta_start = apply_mask(theta0, mask) if rewind else stage_params
    return stages, theta0


def iterative_prune(net, data, schedule: PruneSchedule, train_config, seed: int) -> list[PruneStage]:
    """Magnitude pruning, continuing each round from the trained weights.

    Returns T+1 stages; stage 0 is the full mask with the random init, stage
    i the mask after i prune rounds together with the trained-then-masked
    parameters. Masks are nested.
    """
    stages, _ = _run_prune_loop(net, data, schedule, train_config, seed, rewind=False)
    return stages


def iterative_prune_rewind(
    net, data, schedule: PruneSchedule, train_config, seed: int
) -> tuple[list[PruneStage], ParamVector]:
    """Magnitude pruning, restarting each round from the original init.

    As iterative_prune, but round i trains from theta0 restricted to the
    current mask. Also returns theta0.
    """
    return _run_prune_loop(net, data, schedule, train_config, seed, rewind=True)


def random_layerwise_mask(
    net: NetworkSpec, rates, rng: np.random.Generator
) -> SparsityMask:
    """Uniform random mask with a prescribed sparsity rate per layer.

    Layer l keeps exactly round((1 - rate_l) * K_l) coordinates, positions
    drawn uniformly without replacement (weights and bias pooled).
    """
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (len(net.layers),):
        raise ShapeError(f"need one rate per layer, got {rates.shape}")
    if np.any((rates < 0) | (rates > 1)):
        raise ConfigError("sparsity rates must lie in [0, 1]")
    bits = np.zeros(net.param_count, dtype=np.uint8)
    for rate, l, s in zip(rates, net.layers, net.layout()):
        k_l = l.param_count
        keep = _round_half_up((1.0 - rate) * k_l)
        chosen = rng.choice(k_l, size=keep, replace=False)
        layer_bits = np.zeros(k_l, dtype=np.uint8)
        layer_bits[chosen] = 1
        bits[s.weight_offset : s.weight_offset + k_l] = layer_bits
    return SparsityMask(bits, net.layout())


def layerwise_rates_of(mask: SparsityMask) -> np.ndarray:
    """Per-layer sparsity rates (fraction of zeros) of an existing mask."""
    if mask.offsets is None:
        raise UsageError("mask carries no layer offsets")
    rates = []
    for s in mask.offsets:
        k_l = s.weight_len + s.bias_len
        zeros = k_l - int(mask.bits[s.weight_offset : s.weight_offset + k_l].sum())
        rates.append(zeros / k_l)
    return np.asarray(rates)


def random_global_mask(
    k: int, rate: float, rng: np.random.Generator, offsets=None
) -> SparsityMask:
    """Uniform random mask at a global sparsity rate.

    Keeps exactly round((1 - rate) * K) coordinates (the same rounding rule
    as the layerwise masks); zero positions are drawn uniformly without
    replacement over all K coordinates.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("sparsity rate must lie in [0, 1]")
    zeros = k - _round_half_up((1.0 - rate) * k)
    bits = np.ones(k, dtype=np.uint8)
    bits[rng.choice(k, size=zeros, replace=False)] = 0
    return SparsityMask(bits, offsets)
