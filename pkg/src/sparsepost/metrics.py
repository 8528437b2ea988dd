"""Evaluation of posterior ensembles and of the chains that produced them.

Predictive metrics (accuracy, NLL, ECE) operate on the pooled posterior
predictive distribution. Chain diagnostics (ACF, ESS, CUMSUM) operate on the
instantaneous test NLL, the scalar summary used to track a chain through a
high-dimensional parameter space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError
from .network import Minibatch, NetworkSpec, ParamVector, forward, softmax

if TYPE_CHECKING:
    from .sampling import PosteriorEnsemble
    from .store import Dataset

PROB_FLOOR = 1e-12


@dataclass
class PredictiveMatrix:
    """Row-stochastic matrix of class probabilities, one row per input."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ShapeError("predictive matrix must be 2-D")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ShapeError("probabilities must lie in [0, 1]")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-9:
            raise ShapeError("predictive rows must sum to 1")

    def __len__(self) -> int:
        return self.probs.shape[0]


def _probs_of(pred) -> np.ndarray:
    return pred.probs if isinstance(pred, PredictiveMatrix) else np.asarray(pred, dtype=np.float64)


@dataclass
class ChainTrace:
    """Concatenated per-epoch scalar series with chain boundaries."""

    series: np.ndarray
    boundaries: tuple[int, ...]  # start offset of each chain; implicit end at len

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if not np.all(np.isfinite(self.series)):
            raise ShapeError("trace entries must be finite")
        if self.boundaries and self.boundaries[0] != 0:
            raise ShapeError("first chain must start at offset 0")

    @classmethod
    def from_chains(cls, chains: Sequence[np.ndarray]) -> "ChainTrace":
        bounds, off = [], 0
        for c in chains:
            bounds.append(off)
            off += len(c)
        return cls(np.concatenate([np.asarray(c, dtype=np.float64) for c in chains]), tuple(bounds))

    def per_chain(self) -> list[np.ndarray]:
        ends = list(self.boundaries[1:]) + [len(self.series)]
        return [self.series[a:b] for a, b in zip(self.boundaries, ends)]


@dataclass
class MetricsReport:
    accuracy: float
    nll: float
    ece: float
    ess_mean: float
    acf: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cumsum: np.ndarray = field(default_factory=lambda: np.zeros(0))


def posterior_predictive(ensemble: "PosteriorEnsemble", test_features: np.ndarray) -> PredictiveMatrix:
    """Pooled Monte Carlo predictive: mean softmax over all samples."""
    if ensemble.total_samples < 1:
        raise UsageError("ensemble holds no samples")
    x = np.asarray(test_features, dtype=np.float64)
    net = ensemble.net
    layout = net.layout()
    total = np.zeros((x.shape[0], net.num_classes))
    count = 0
    batch = Minibatch(x, np.zeros(x.shape[0], dtype=np.int64))
    for g in ensemble.groups:
        for s in range(g.num_samples):
            pv = ParamVector(g.dense_sample(s), layout)
            logits, _ = forward(net, pv, None, batch)
            total += softmax(logits)
            count += 1
    return PredictiveMatrix(total / count)


def accuracy(pred, labels) -> float:
    """Fraction of rows whose argmax matches the label (ties to lowest class)."""
    probs = _probs_of(pred)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] != labels.shape[0]:
        raise ShapeError("prediction/label counts differ")
    return float((probs.argmax(axis=1) == labels).mean())


def nll(pred, labels) -> float:
    """Mean negative log predictive probability of the true class."""
    probs = _probs_of(pred)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def ece(pred, labels, num_bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins on (0, 1].

    Bin b covers (b/M, (b+1)/M]; a confidence of exactly 0 lands in bin 0.
    Empty bins contribute nothing.
    """
    if num_bins < 1:
        raise UsageError("need at least one bin")
    probs = _probs_of(pred)
    labels = np.asarray(labels, dtype=np.int64)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    # ceil(conf * M) - 1 maps (b/M, (b+1)/M] onto bin b
    bins = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    total = 0.0
    n = conf.shape[0]
    for b in range(num_bins):
        in_bin = bins == b
        n_b = int(in_bin.sum())
        if n_b == 0:
            continue
        total += (n_b / n) * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(total)


def inll(net: NetworkSpec, theta: ParamVector, mask, test_set: "Dataset") -> float:
    """Instantaneous NLL of a single sampled model on the test set."""
    batch = Minibatch(test_set.features, test_set.labels)
    logits, _ = forward(net, theta, mask, batch)
    probs = softmax(logits)
    return nll(probs, test_set.labels)


def ensemble_inll_series(ensemble: "PosteriorEnsemble", test_set: "Dataset") -> list[np.ndarray]:
    """Per-chain iNLL series, one value per stored sample."""
    out = []
    for c, g in enumerate(ensemble.groups):
        vals = np.empty(g.num_samples)
        for s in range(g.num_samples):
            vals[s] = inll(ensemble.net, ensemble.sample_param_vector(c, s), None, test_set)
        out.append(vals)
    return out


def acf(series, max_lag: int) -> np.ndarray:
    """Autocorrelation up to ``max_lag``, normalized by the total variance.

    Biased normalization keeps |rho(t)| <= 1. A constant series has no
    variance; rho(0) stays 1 by definition, rho(t > 0) is defined as 0, and
    a warning flags the degenerate input.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("series must be 1-D")
    if x.shape[0] <= max_lag:
        raise UsageError(f"series of length {x.shape[0]} too short for lag {max_lag}")
    centered = x - x.mean()
    denom = float(centered @ centered)
    rho = np.zeros(max_lag + 1)
    rho[0] = 1.0
    if denom == 0.0:
        warnings.warn("constant series: autocorrelation undefined, returning zeros")
        return rho
    for t in range(1, max_lag + 1):
        rho[t] = float(centered[:-t] @ centered[t:]) / denom
    return rho


def _within_autocov(chains: np.ndarray, t: int) -> np.ndarray:
    """Per-chain lag-t autocovariance with 1/L normalization."""
    l = chains.shape[1]
    centered = chains - chains.mean(axis=1, keepdims=True)
    if t == 0:
        return (centered * centered).sum(axis=1) / l
    return (centered[:, :-t] * centered[:, t:]).sum(axis=1) / l


def ess(chains: Sequence[np.ndarray]) -> float:
    """Multi-chain effective sample size with Geyer truncation.

    Combines within-chain (W) and between-chain (B) variances into the
    pooled autocorrelation rho_t = 1 - (W - c_t) / var_plus and returns
    M*L / (1 + 2 * sum rho_t), summing lags up to the last pair
    (rho_2k, rho_2k+1) with a nonnegative sum. The result is clipped to
    [1, M*L]. Constant chains are flagged and return M*L by convention.
    """
    arrs = [np.asarray(c, dtype=np.float64) for c in chains]
    if len(arrs) < 1:
        raise UsageError("need at least one chain")
    l = arrs[0].shape[0]
    if any(a.ndim != 1 or a.shape[0] != l for a in arrs):
        raise ShapeError("chains must be equal-length 1-D series")
    if l < 4:
        raise UsageError("chains must have length >= 4")
    m = len(arrs)
    x = np.stack(arrs)
    w = float(x.var(axis=1, ddof=1).mean())
    if w == 0.0:
        warnings.warn("constant chains: ESS undefined, returning M*L by convention")
        return float(m * l)
    if m > 1:
        b = l * float(x.mean(axis=1).var(ddof=1))
        var_plus = (l - 1) / l * w + b / l
    else:
        var_plus = (l - 1) / l * w + w / l
    max_lag = l - 1
    cache: dict[int, float] = {}

    def rho(t: int) -> float:
        if t not in cache:
            cache[t] = 1.0 - (w - float(_within_autocov(x, t).mean())) / var_plus
        return cache[t]

    k = 1
    while 2 * k + 1 <= max_lag and rho(2 * k) + rho(2 * k + 1) >= 0.0:
        k += 1
    t_max = min(2 * k - 1, max_lag)
    tail = sum(rho(t) for t in range(1, t_max + 1))
    result = m * l / (1.0 + 2.0 * tail)
    return float(np.clip(result, 1.0, m * l))


def cumsum_diag(series) -> np.ndarray:
    """Scaled cumulative deviation from the series mean.

    D_i = (1/S) * sum_{s<=i} (x_s - mean); the last entry is 0 by
    construction. Well-mixing chains give an irregular path hugging zero,
    slowly mixing chains make long excursions.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] == 0:
        raise ShapeError("series must be a nonempty 1-D vector")
    return np.cumsum(x - x.mean()) / x.shape[0]


def windowed(series: np.ndarray, start_epoch: int, lo: int, hi: int) -> np.ndarray:
    """Slice a per-epoch series to epochs lo..hi inclusive (1-based)."""
    x = np.asarray(series)
    epochs = np.arange(start_epoch, start_epoch + x.shape[0])
    return x[(epochs >= lo) & (epochs <= hi)]
