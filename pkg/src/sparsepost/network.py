"""Feed-forward network core: forward pass, exact backprop, and the
stochastic gradient of the posterior energy.

Parameters live in a single flat 64-bit vector laid out layer by layer as
``[W_0, b_0, W_1, b_1, ...]`` with each weight matrix stored row-major in
``(in_dim, out_dim)`` orientation. All arithmetic is float64 so gradient
checks against central finite differences hold to tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import NumericError, ShapeError, UsageError

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)


@dataclass(frozen=True)
class LayerSpec:
    """One affine layer followed by an elementwise activation."""

    in_dim: int
    out_dim: int
    activation: str = RELU

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def weight_count(self) -> int:
        return self.in_dim * self.out_dim

    @property
    def param_count(self) -> int:
        return self.weight_count + self.out_dim


class LayerSlice(NamedTuple):
    """Offsets of one layer's weights and bias inside the flat vector."""

    weight_offset: int
    weight_len: int
    bias_offset: int
    bias_len: int


@dataclass(frozen=True)
class NetworkSpec:
    """An MLP: a chain of layers ending in ``num_classes`` logits.

    The final layer uses the identity activation; softmax is applied inside
    the loss, never in the forward pass.
    """

    layers: tuple[LayerSpec, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer chain broken: {a.out_dim} -> {b.in_dim}")
        if self.layers[-1].out_dim != self.num_classes:
            raise ShapeError("last layer out_dim must equal num_classes")

    @classmethod
    def mlp(cls, input_dim: int, hidden: list[int], num_classes: int) -> "NetworkSpec":
        """ReLU hidden layers, identity output layer."""
        dims = [input_dim, *hidden, num_classes]
        layers = [
            LayerSpec(dims[i], dims[i + 1], RELU if i + 2 < len(dims) else IDENTITY)
            for i in range(len(dims) - 1)
        ]
        return cls(tuple(layers), num_classes)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers)

    def layout(self) -> tuple[LayerSlice, ...]:
        slices = []
        off = 0
        for l in self.layers:
            slices.append(LayerSlice(off, l.weight_count, off + l.weight_count, l.out_dim))
            off += l.param_count
        return tuple(slices)


@dataclass
class ParamVector:
    """Flat parameter vector with per-layer offsets."""

    values: np.ndarray
    offsets: tuple[LayerSlice, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("parameter vector must be 1-D")
        expect = self.offsets[-1].bias_offset + self.offsets[-1].bias_len
        if self.values.shape[0] != expect:
            raise ShapeError(f"expected {expect} parameters, got {self.values.shape[0]}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, net: NetworkSpec) -> "ParamVector":
        return cls(np.zeros(net.param_count), net.layout())

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.offsets)

    def weight(self, layer: int, in_dim: int, out_dim: int) -> np.ndarray:
        """View of layer ``layer``'s weights as an (in_dim, out_dim) matrix."""
        s = self.offsets[layer]
        return self.values[s.weight_offset : s.weight_offset + s.weight_len].reshape(in_dim, out_dim)

    def bias(self, layer: int) -> np.ndarray:
        s = self.offsets[layer]
        return self.values[s.bias_offset : s.bias_offset + s.bias_len]


@dataclass(frozen=True)
class PriorConfig:
    """Isotropic Gaussian prior with precision ``precision``."""

    precision: float = 0.0

    def __post_init__(self):
        if self.precision < 0:
            raise ShapeError("prior precision must be nonnegative")


@dataclass
class Minibatch:
    """A batch of feature rows and integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("features must be 2-D, labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("feature/label row counts differ")
        if self.features.shape[0] < 1:
            raise ShapeError("batch must contain at least one row")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("batch features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class ForwardCache:
    """Intermediate state from a forward pass, consumed by backward()."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    post_activations: list[np.ndarray]
    masked_values: np.ndarray
    shape_key: tuple = field(default_factory=tuple)


def init_params(net: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """He-uniform weights (+-sqrt(6/in_dim)), zero biases."""
    p = ParamVector.zeros(net)
    for i, l in enumerate(net.layers):
        bound = np.sqrt(6.0 / l.in_dim)
        p.weight(i, l.in_dim, l.out_dim)[...] = rng.uniform(-bound, bound, (l.in_dim, l.out_dim))
    return p


def _masked_values(net: NetworkSpec, params: ParamVector, mask) -> np.ndarray:
    if len(params) != net.param_count:
        raise ShapeError("parameter vector does not match the network")
    if mask is None:
        return params.values
    bits = mask.bits
    if bits.shape[0] != len(params):
        raise ShapeError("mask length does not match the parameter vector")
    return params.values * bits


def _forward_values(net: NetworkSpec, values: np.ndarray, x: np.ndarray):
    """Forward pass from a flat (already masked) value vector."""
    pre, post = [], []
    h = x
    for i, (l, s) in enumerate(zip(net.layers, net.layout())):
        w = values[s.weight_offset : s.weight_offset + s.weight_len].reshape(l.in_dim, l.out_dim)
        b = values[s.bias_offset : s.bias_offset + s.bias_len]
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if l.activation == RELU else z
        post.append(h)
    return h, pre, post


def forward(
    net: NetworkSpec,
    params: ParamVector,
    mask,
    batch: Minibatch,
) -> tuple[np.ndarray, ForwardCache]:
    """Compute logits for ``batch`` at the masked parameters.

    Returns ``(logits, cache)`` where the cache holds everything backward()
    needs. The mask, when given, is absorbed into the parameters first, so
    ``forward(net, p, m, x) == forward(net, m*p, None, x)`` bit for bit.
    """
    if batch.features.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch features have {batch.features.shape[1]} columns, network expects {net.input_dim}"
        )
    values = _masked_values(net, params, mask)
    logits, pre, post = _forward_values(net, values, batch.features)
    cache = ForwardCache(
        inputs=batch.features,
        pre_activations=pre,
        post_activations=post,
        masked_values=values,
        shape_key=(tuple(net.layers), batch.features.shape),
    )
    return logits, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax with the max-shift for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def nll_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log likelihood and its gradient w.r.t. the logits.

    ``dlogits`` is ``(softmax - onehot) / B``, the gradient of the mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain non-finite values")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("label count does not match logit rows")
    b = logits.shape[0]
    logp = log_softmax(logits)
    mean_nll = -float(logp[np.arange(b), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return mean_nll, dlogits


def backward(
    net: NetworkSpec,
    params: ParamVector,
    mask,
    cache: ForwardCache,
    dlogits: np.ndarray,
) -> ParamVector:
    """Exact gradient of the mean NLL w.r.t. the flat parameter vector.

    Gradients are taken at the masked parameters; coordinates the mask
    zeroes out get gradient exactly 0.
    """
    if cache.shape_key != (tuple(net.layers), cache.inputs.shape):
        raise UsageError("cache does not belong to this network")
    if dlogits.shape != (cache.inputs.shape[0], net.num_classes):
        raise UsageError("dlogits shape does not match the cached forward pass")
    grad = ParamVector.zeros(net)
    delta = dlogits
    layout = net.layout()
    for i in range(len(net.layers) - 1, -1, -1):
        l, s = net.layers[i], layout[i]
        h_in = cache.inputs if i == 0 else cache.post_activations[i - 1]
        grad.values[s.weight_offset : s.weight_offset + s.weight_len] = (h_in.T @ delta).ravel()
        grad.values[s.bias_offset : s.bias_offset + s.bias_len] = delta.sum(axis=0)
        if i > 0:
            w = cache.masked_values[s.weight_offset : s.weight_offset + s.weight_len].reshape(
                l.in_dim, l.out_dim
            )
            delta = delta @ w.T
            # ReLU subgradient at 0 is defined as 0
            if net.layers[i - 1].activation == RELU:
                delta = delta * (cache.pre_activations[i - 1] > 0.0)
    if mask is not None:
        grad.values *= mask.bits
    return grad


def stochastic_grad_U(
    net: NetworkSpec,
    params: ParamVector,
    mask,
    batch: Minibatch,
    dataset_size: int,
    prior: PriorConfig,
) -> ParamVector:
    """Stochastic gradient of the posterior energy restricted to the mask.

    U(theta) = -log p(theta | precision) - sum_i log p(y_i | x_i, theta);
    the minibatch estimate is ``precision * (m * theta) + (N/B) * sum_batch
    grad(nll_i)``, here computed as N times the mean-NLL gradient.
    """
    if len(batch) > dataset_size:
        raise ShapeError("minibatch larger than the dataset it came from")
    logits, cache = forward(net, params, mask, batch)
    _, dlogits = nll_loss(logits, batch.labels)
    grad = backward(net, params, mask, cache, dlogits)
    out = prior.precision * _masked_values(net, params, mask) + dataset_size * grad.values
    if mask is not None:
        out *= mask.bits
    return ParamVector(out, params.offsets)
