"""CSR inference kernels and the CPU timing harness.

Within a chain the mask is fixed, so one CSR structure per layer is shared
by all of that chain's samples; successive samples only swap the value
arrays. The matrix-vector product itself is delegated to scipy's compiled
CSR kernel; the structure, validation, and value plumbing are ours.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy import sparse as sp
from threadpoolctl import threadpool_limits

from .errors import ConfigError, ShapeError, UsageError
from .metrics import PredictiveMatrix
from .network import IDENTITY, RELU, NetworkSpec, ParamVector

if TYPE_CHECKING:
    from .masking import SparsityMask
    from .sampling import PosteriorEnsemble


@dataclass
class CSRMatrix:
    """Compressed sparse row matrix with validated structure."""

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.vals = np.asarray(self.vals, dtype=np.float64)
        if self.row_ptr.shape != (self.rows + 1,):
            raise ShapeError("row_ptr must have rows+1 entries")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.col_idx.shape[0]:
            raise ShapeError("row_ptr must start at 0 and end at nnz")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ShapeError("row_ptr must be nondecreasing")
        if self.col_idx.shape != self.vals.shape:
            raise ShapeError("col_idx and vals must have equal length")
        if self.col_idx.size and (self.col_idx.min() < 0 or self.col_idx.max() >= self.cols):
            raise ShapeError("column indices out of range")
        for r in range(self.rows):
            seg = self.col_idx[self.row_ptr[r] : self.row_ptr[r + 1]]
            if np.any(np.diff(seg) <= 0):
                raise ShapeError(f"column indices not strictly increasing in row {r}")
        self._handle = sp.csr_matrix(
            (self.vals, self.col_idx, self.row_ptr), shape=(self.rows, self.cols), copy=False
        )

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    def set_values(self, vals: np.ndarray) -> None:
        """Swap in a new value array; the sparsity structure is unchanged."""
        if vals.shape != self.vals.shape:
            raise ShapeError("value array length must match nnz")
        self._handle.data[:] = vals
        if self._handle.data is not self.vals:
            self.vals[:] = vals

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.cols:
            raise ShapeError(f"vector length {x.shape[0]} != {self.cols} columns")
        return self._handle.dot(x)

    def densify(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        for r in range(self.rows):
            seg = slice(self.row_ptr[r], self.row_ptr[r + 1])
            out[r, self.col_idx[seg]] = self.vals[seg]
        return out


def to_csr(params: ParamVector, mask: "SparsityMask", layer_index: int) -> CSRMatrix:
    """CSR of one layer's weight matrix in (out_dim, in_dim) orientation.

    Every coordinate the mask keeps becomes a structural nonzero, even when
    its current value is 0, so the structure depends only on the mask.
    """
    s = params.offsets[layer_index]
    out_dim = s.bias_len
    in_dim = s.weight_len // out_dim
    wbits = mask.bits[s.weight_offset : s.weight_offset + s.weight_len].reshape(in_dim, out_dim)
    wvals = (params.values * mask.bits)[s.weight_offset : s.weight_offset + s.weight_len].reshape(
        in_dim, out_dim
    )
    rows, cols = np.nonzero(wbits.T)
    counts = np.bincount(rows, minlength=out_dim)
    row_ptr = np.concatenate(([0], np.cumsum(counts)))
    return CSRMatrix(out_dim, in_dim, row_ptr, cols, wvals.T[rows, cols])


@dataclass
class _SparseLayer:
    csr: CSRMatrix
    bias: np.ndarray
    activation: str
    # index maps from a chain's active-value vector into this layer
    weight_take: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bias_slots: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bias_take: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class SparseModel:
    """Per-layer CSR weights plus dense bias vectors for one masked network."""

    net: NetworkSpec
    layers: list[_SparseLayer]

    @classmethod
    def from_params(cls, net: NetworkSpec, params: ParamVector, mask: "SparsityMask") -> "SparseModel":
        model = cls.structure_for(net, mask)
        model.load_sample((params.values * mask.bits)[mask.active_indices()])
        return model

    @classmethod
    def structure_for(cls, net: NetworkSpec, mask: "SparsityMask") -> "SparseModel":
        """Build the shared CSR structure for a mask, values all zero."""
        if len(mask) != net.param_count:
            raise ShapeError("mask length does not match the network")
        active = mask.active_indices()
        zero = ParamVector.zeros(net)
        layers = []
        for i, (l, s) in enumerate(zip(net.layers, net.layout())):
            csr = to_csr(zero, mask, i)
            rows, cols = _structural_coords(mask, s, l.in_dim, l.out_dim)
            flat = s.weight_offset + cols * l.out_dim + rows
            weight_take = np.searchsorted(active, flat)
            bbits = mask.bits[s.bias_offset : s.bias_offset + s.bias_len]
            bias_slots = np.flatnonzero(bbits)
            bias_take = np.searchsorted(active, s.bias_offset + bias_slots)
            layers.append(
                _SparseLayer(
                    csr,
                    np.zeros(l.out_dim),
                    l.activation,
                    weight_take=weight_take,
                    bias_slots=bias_slots,
                    bias_take=bias_take,
                )
            )
        return cls(net, layers)

    def load_sample(self, active_values: np.ndarray) -> None:
        """Swap one sample's active values into the shared structure."""
        for layer in self.layers:
            layer.csr.set_values(active_values[layer.weight_take])
            layer.bias[:] = 0.0
            layer.bias[layer.bias_slots] = active_values[layer.bias_take]


def _structural_coords(mask, s, in_dim, out_dim):
    wbits = mask.bits[s.weight_offset : s.weight_offset + s.weight_len].reshape(in_dim, out_dim)
    return np.nonzero(wbits.T)


def _softmax_1d(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def spmv_logits(model: SparseModel, x: np.ndarray) -> np.ndarray:
    """Raw logits of the sparse forward pass for one input vector."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape != (model.net.input_dim,):
        raise ShapeError(f"input must be a vector of length {model.net.input_dim}")
    for layer in model.layers:
        h = layer.csr.matvec(h) + layer.bias
        if layer.activation == RELU:
            h = np.maximum(h, 0.0)
    return h


def spmv_forward(model: SparseModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities of the sparse forward pass for one input vector."""
    return _softmax_1d(spmv_logits(model, x))


def ensemble_predict_sparse(ensemble: "PosteriorEnsemble", inputs: np.ndarray) -> PredictiveMatrix:
    """Pooled posterior predictive computed with the CSR kernels."""
    if ensemble.total_samples < 1:
        raise UsageError("ensemble holds no samples")
    x = np.asarray(inputs, dtype=np.float64)
    total = np.zeros((x.shape[0], ensemble.net.num_classes))
    count = 0
    for g in ensemble.groups:
        model = SparseModel.structure_for(ensemble.net, g.mask)
        for s in range(g.num_samples):
            model.load_sample(g.samples[s])
            for i in range(x.shape[0]):
                total[i] += spmv_forward(model, x[i])
            count += 1
    return PredictiveMatrix(total / count)


@dataclass
class BenchRow:
    method: str
    sparsity: float
    num_samples: int
    latency_s: float
    speedup: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    hardware: str
    repetitions: int


class _DensePredictor:
    """Dense ensemble inference, vectorized across samples.

    The first layer sees the same input for every sample, so its weights are
    stacked into one (S*out, in) matrix; deeper layers use batched matmuls
    over the per-sample hidden states. One image at a time throughout.
    """

    def __init__(self, ensemble: "PosteriorEnsemble", limit_samples: Optional[int] = None):
        self.net = ensemble.net
        mats: list[list[np.ndarray]] = [[] for _ in self.net.layers]
        biases: list[list[np.ndarray]] = [[] for _ in self.net.layers]
        count = 0
        for c, g in enumerate(ensemble.groups):
            for s in range(g.num_samples):
                pv = ensemble.sample_param_vector(c, s)
                for i, l in enumerate(self.net.layers):
                    mats[i].append(pv.weight(i, l.in_dim, l.out_dim).T.copy())
                    biases[i].append(pv.bias(i).copy())
                count += 1
                if limit_samples is not None and count >= limit_samples:
                    break
            if limit_samples is not None and count >= limit_samples:
                break
        self.num_samples = count
        self.first_w = np.concatenate(mats[0], axis=0)  # (S*out, in)
        self.first_b = np.concatenate(biases[0])
        self.deep_w = [np.stack(m) for m in mats[1:]]  # (S, out, in)
        self.deep_b = [np.stack(b) for b in biases[1:]]

    def predict(self, x: np.ndarray) -> np.ndarray:
        s = self.num_samples
        h = (self.first_w @ x + self.first_b).reshape(s, -1)
        if self.net.layers[0].activation == RELU:
            np.maximum(h, 0.0, out=h)
        for w, b, l in zip(self.deep_w, self.deep_b, self.net.layers[1:]):
            h = np.matmul(w, h[:, :, None])[:, :, 0] + b
            if l.activation == RELU:
                np.maximum(h, 0.0, out=h)
        h -= h.max(axis=1, keepdims=True)
        np.exp(h, out=h)
        h /= h.sum(axis=1, keepdims=True)
        return h.mean(axis=0)


class _SparsePredictor:
    """CSR ensemble inference, vectorized across samples.

    All samples of all chains are fused per layer: the first layer stacks
    per-sample CSR blocks by rows (shared input), deeper layers form a
    block-diagonal CSR over the concatenated hidden state. This keeps one
    compiled sparse matvec per layer per image.
    """

    def __init__(self, ensemble: "PosteriorEnsemble"):
        net = ensemble.net
        self.net = net
        self.num_classes = net.num_classes
        blocks: list[list[sp.csr_matrix]] = [[] for _ in net.layers]
        biases: list[list[np.ndarray]] = [[] for _ in net.layers]
        for g in ensemble.groups:
            model = SparseModel.structure_for(net, g.mask)
            for s in range(g.num_samples):
                model.load_sample(g.samples[s])
                for i, layer in enumerate(model.layers):
                    blocks[i].append(
                        sp.csr_matrix(
                            (layer.csr.vals.copy(), layer.csr.col_idx, layer.csr.row_ptr),
                            shape=(layer.csr.rows, layer.csr.cols),
                        )
                    )
                    biases[i].append(layer.bias.copy())
        self.num_samples = len(blocks[0])
        self.first = sp.vstack(blocks[0], format="csr")  # (S*out, in)
        self.first_b = np.concatenate(biases[0])
        self.deep = [sp.block_diag(b, format="csr") for b in blocks[1:]]
        self.deep_b = [np.concatenate(b) for b in biases[1:]]

    def predict(self, x: np.ndarray) -> np.ndarray:
        s = self.num_samples
        h = self.first.dot(x) + self.first_b
        if self.net.layers[0].activation == RELU:
            np.maximum(h, 0.0, out=h)
        for w, b, l in zip(self.deep, self.deep_b, self.net.layers[1:]):
            h = w.dot(h) + b
            if l.activation == RELU:
                np.maximum(h, 0.0, out=h)
        h = h.reshape(s, -1)
        h -= h.max(axis=1, keepdims=True)
        np.exp(h, out=h)
        h /= h.sum(axis=1, keepdims=True)
        return h.mean(axis=0)


def _time_predictor(predictor, inputs: np.ndarray, repetitions: int) -> float:
    """Median per-input wall-clock latency; one untimed warm-up pass."""
    for i in range(inputs.shape[0]):
        predictor.predict(inputs[i])
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for i in range(inputs.shape[0]):
            predictor.predict(inputs[i])
        times.append((time.perf_counter() - t0) / inputs.shape[0])
    return float(np.median(times))


def _mean_sparsity(ensemble: "PosteriorEnsemble") -> float:
    return float(np.mean([g.mask.sparsity() for g in ensemble.groups]))


def _method_label(ensemble: "PosteriorEnsemble") -> str:
    methods = {g.provenance.method for g in ensemble.groups}
    method = methods.pop() if len(methods) == 1 else "MIXED"
    return "Full-SGHMC" if method == "FULL" else f"{method}-SGHMC"


def bench(
    ensemble_dense: "PosteriorEnsemble",
    ensemble_sparse_list: list["PosteriorEnsemble"],
    n_inputs: int,
    repetitions: int,
    seed: int = 0,
) -> BenchReport:
    """Per-input latency of dense vs CSR ensemble inference.

    Latency is the median over repetitions of total wall-clock time divided
    by ``n_inputs`` (batch size 1 throughout). A Full-OPT row times a single
    dense point model. The harness pins BLAS to one thread for stable
    numbers; a warm-up pass is excluded.
    """
    if repetitions < 3:
        raise ConfigError("need at least 3 repetitions")
    rng = np.random.default_rng(seed)
    inputs = rng.random((n_inputs, ensemble_dense.net.input_dim))
    hardware = f"{platform.system()} {platform.machine()}, single-thread pinned"
    rows = []
    with threadpool_limits(limits=1):
        dense_latency = _time_predictor(_DensePredictor(ensemble_dense), inputs, repetitions)
        rows.append(
            BenchRow(
                _method_label(ensemble_dense),
                _mean_sparsity(ensemble_dense),
                ensemble_dense.total_samples,
                dense_latency,
                1.0,
            )
        )
        for ens in ensemble_sparse_list:
            latency = _time_predictor(_SparsePredictor(ens), inputs, repetitions)
            rows.append(
                BenchRow(
                    _method_label(ens),
                    _mean_sparsity(ens),
                    ens.total_samples,
                    latency,
                    dense_latency / latency,
                )
            )
        point_latency = _time_predictor(
            _DensePredictor(ensemble_dense, limit_samples=1), inputs, repetitions
        )
        rows.append(BenchRow("Full-OPT", 0.0, 1, point_latency, dense_latency / point_latency))
    return BenchReport(rows, hardware, repetitions)
