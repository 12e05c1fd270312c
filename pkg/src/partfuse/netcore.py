"""Dense feedforward networks: evaluation, ensembling, serialization."""

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Optional, Sequence

import numpy as np

_GELU_CUBIC = 0.044715
_GELU_SCALE = np.sqrt(2.0 / np.pi)

PFNN_MAGIC = b"PFNN"
PFNN_VERSION = 1


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


class PfnnFormatError(ValueError):
    """Raised when a PFNN file cannot be parsed; names the bad field."""


class ActivationKind(Enum):
    GELU = 0
    RELU = 1
    IDENTITY = 2

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self is ActivationKind.RELU:
            return np.maximum(x, 0.0)
        if self is ActivationKind.IDENTITY:
            return x
        # tanh approximation of GELU with the usual fixed constants
        inner = _GELU_SCALE * (x + _GELU_CUBIC * (x * x * x))
        return 0.5 * x * (1.0 + np.tanh(inner))

    def derivative(self, x: np.ndarray) -> np.ndarray:
        return self.value_and_derivative(x)[1]

    def value_and_derivative(self, x: np.ndarray):
        """Both at once; the GELU path shares one tanh evaluation."""
        if self is ActivationKind.RELU:
            return np.maximum(x, 0.0), (x > 0.0).astype(np.float64)
        if self is ActivationKind.IDENTITY:
            return x, np.ones_like(x)
        sq = x * x
        inner = _GELU_SCALE * (x + _GELU_CUBIC * (sq * x))
        t = np.tanh(inner)
        value = 0.5 * x * (1.0 + t)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_SCALE * (
            1.0 + 3.0 * _GELU_CUBIC * sq
        )
        return value, deriv


def _as_f64(a, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class DenseNetwork:
    """An MLP with `len(hidden_dims)` hidden layers.

    weights[l] has shape (dims[l+1], dims[l]) for the dimension chain
    dims = [input_dim, *hidden_dims, output_dim]; biases[l] matches the
    rows of weights[l].  The activation is applied after every layer
    except the last.  Instances are immutable: the arrays are marked
    read-only so they can be shared freely across threads.

    origins, when present, tags each hidden neuron of each layer with the
    parent it came from (0 = A, 1 = B) for ensembles built by
    make_ensemble.  It is not serialized.
    """

    input_dim: int
    hidden_dims: tuple
    output_dim: int
    weights: tuple
    biases: tuple
    activation: ActivationKind
    origins: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.hidden_dims) < 1:
            raise ShapeError("at least one hidden layer is required")
        dims = self.dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("expected one weight/bias per layer transition")
        ws, bs = [], []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = _as_f64(w, f"weights[{l}]")
            b = _as_f64(b, f"biases[{l}]")
            if w.shape != (dims[l + 1], dims[l]):
                raise ShapeError(
                    f"weights[{l}] has shape {w.shape}, expected {(dims[l + 1], dims[l])}"
                )
            if b.shape != (dims[l + 1],):
                raise ShapeError(f"biases[{l}] has shape {b.shape}, expected ({dims[l + 1]},)")
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.origins is not None:
            if len(self.origins) != self.num_hidden:
                raise ShapeError("origins must tag every hidden layer")
            object.__setattr__(
                self,
                "origins",
                tuple(np.asarray(o, dtype=np.int64) for o in self.origins),
            )

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_hidden(self) -> int:
        return len(self.hidden_dims)

    def equals(self, other: "DenseNetwork") -> bool:
        """Bitwise equality of architecture and parameters."""
        if self.dims != other.dims or self.activation is not other.activation:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights)) and all(
            np.array_equal(a, b) for a, b in zip(self.biases, other.biases)
        )


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = _as_f64(self.inputs, "inputs")
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise ShapeError("inputs must be N x d with one label per row")
        if inputs.shape[0] < 1:
            raise ShapeError("dataset is empty")
        if labels.min() < 0:
            raise ValueError("negative label")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _check_batch(net: DenseNetwork, batch: np.ndarray) -> np.ndarray:
    batch = _as_f64(batch, "batch")
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"batch has shape {batch.shape}, expected (N, {net.input_dim})")
    return batch


def forward(net: DenseNetwork, batch: np.ndarray) -> np.ndarray:
    """Evaluate the network, returning an N x output_dim matrix of logits."""
    h = _check_batch(net, batch)
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if l < last:
            h = net.activation.apply(h)
    return h


def activations(net: DenseNetwork, batch: np.ndarray, layer: int) -> np.ndarray:
    """Post-activation hidden state at hidden layer `layer` (1-based, 1..L).

    Column i is the feature vector of neuron i over the batch.
    """
    if not 1 <= layer <= net.num_hidden:
        raise ShapeError(f"layer {layer} out of range 1..{net.num_hidden}")
    h = _check_batch(net, batch)
    for l in range(layer):
        h = net.activation.apply(h @ net.weights[l].T + net.biases[l])
    return h


def make_ensemble(net_a: DenseNetwork, net_b: DenseNetwork, lam: float) -> DenseNetwork:
    """Block-diagonal ensemble computing lam*f_A + (1-lam)*f_B.

    Hidden layers stack both parents untouched; the output layer carries the
    convex weighting.  Hidden neurons keep origin tags so importance-weighted
    pruning can tell the parents apart later.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if (
        net_a.input_dim != net_b.input_dim
        or net_a.output_dim != net_b.output_dim
        or net_a.num_hidden != net_b.num_hidden
        or net_a.activation is not net_b.activation
    ):
        raise ShapeError("ensemble parents must share boundary dims, depth and activation")
    L = net_a.num_hidden
    weights, biases = [], []
    for l in range(L + 1):
        wa, wb = net_a.weights[l], net_b.weights[l]
        ba, bb = net_a.biases[l], net_b.biases[l]
        if l == 0:
            w = np.vstack([wa, wb])
            b = np.concatenate([ba, bb])
        elif l == L:
            w = np.hstack([lam * wa, (1.0 - lam) * wb])
            b = lam * ba + (1.0 - lam) * bb
        else:
            w = np.zeros((wa.shape[0] + wb.shape[0], wa.shape[1] + wb.shape[1]))
            w[: wa.shape[0], : wa.shape[1]] = wa
            w[wa.shape[0] :, wa.shape[1] :] = wb
            b = np.concatenate([ba, bb])
        weights.append(w)
        biases.append(b)
    origins = tuple(
        np.concatenate([np.zeros(na, dtype=np.int64), np.ones(nb, dtype=np.int64)])
        for na, nb in zip(net_a.hidden_dims, net_b.hidden_dims)
    )
    return DenseNetwork(
        input_dim=net_a.input_dim,
        hidden_dims=tuple(a + b for a, b in zip(net_a.hidden_dims, net_b.hidden_dims)),
        output_dim=net_a.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net_a.activation,
        origins=origins,
    )


def permute_hidden_layer(net: DenseNetwork, layer: int, perm: Sequence[int]) -> DenseNetwork:
    """Relabel the neurons of one hidden layer; the network function is unchanged.

    perm[k] gives the old index of the neuron placed at new position k.
    """
    if not 1 <= layer <= net.num_hidden:
        raise ShapeError(f"layer {layer} out of range")
    perm = np.asarray(perm, dtype=np.int64)
    n = net.hidden_dims[layer - 1]
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm is not a permutation of the layer")
    weights = list(net.weights)
    biases = list(net.biases)
    weights[layer - 1] = weights[layer - 1][perm, :]
    biases[layer - 1] = biases[layer - 1][perm]
    weights[layer] = weights[layer][:, perm]
    return DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=net.hidden_dims,
        output_dim=net.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net.activation,
    )


def evaluate_accuracy(net: DenseNetwork, dataset: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit equals the label.

    Ties break toward the lowest class index (np.argmax convention).
    """
    if dataset.inputs.shape[1] != net.input_dim:
        raise ShapeError("dataset feature dimension does not match the network")
    if dataset.labels.max() >= net.output_dim:
        raise ValueError("label outside the network's output range")
    logits = forward(net, dataset.inputs)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == dataset.labels))


# ---------------------------------------------------------------------------
# PFNN serialization: magic "PFNN", u32 version, u8 activation code,
# u32 L, u32 dims[L+2], then per layer the row-major f64 weights followed by
# the f64 biases.  All integers and floats are little-endian.


def save(net: DenseNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(PFNN_MAGIC)
        fh.write(struct.pack("<I", PFNN_VERSION))
        fh.write(struct.pack("<B", net.activation.value))
        fh.write(struct.pack("<I", net.num_hidden))
        fh.write(struct.pack(f"<{len(net.dims)}I", *net.dims))
        for w, b in zip(net.weights, net.biases):
            fh.write(w.astype("<f8").tobytes(order="C"))
            fh.write(b.astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise PfnnFormatError(f"truncated file while reading {what}")
    return data


def load(path) -> DenseNetwork:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != PFNN_MAGIC:
            raise PfnnFormatError(f"bad magic {magic!r}, expected {PFNN_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != PFNN_VERSION:
            raise PfnnFormatError(f"unsupported version {version}")
        (act_code,) = struct.unpack("<B", _read_exact(fh, 1, "activation"))
        try:
            act = ActivationKind(act_code)
        except ValueError:
            raise PfnnFormatError(f"unknown activation code {act_code}") from None
        (L,) = struct.unpack("<I", _read_exact(fh, 4, "hidden layer count"))
        if L < 1:
            raise PfnnFormatError(f"hidden layer count {L} must be >= 1")
        dims = struct.unpack(f"<{L + 2}I", _read_exact(fh, 4 * (L + 2), "dims"))
        if any(d < 1 for d in dims):
            raise PfnnFormatError(f"non-positive entry in dims {dims}")
        weights, biases = [], []
        for l in range(L + 1):
            rows, cols = dims[l + 1], dims[l]
            raw = _read_exact(fh, 8 * rows * cols, f"weights[{l}]")
            weights.append(np.frombuffer(raw, dtype="<f8").reshape(rows, cols))
            raw = _read_exact(fh, 8 * rows, f"biases[{l}]")
            biases.append(np.frombuffer(raw, dtype="<f8"))
        if fh.read(1):
            raise PfnnFormatError("trailing data after final bias block")
    return DenseNetwork(
        input_dim=dims[0],
        hidden_dims=dims[1:-1],
        output_dim=dims[-1],
        weights=tuple(weights),
        biases=tuple(biases),
        activation=act,
    )
