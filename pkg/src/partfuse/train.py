"""Minimal MLP training: softmax cross-entropy, Adam, exact zero-block freezing."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .netcore import ActivationKind, DenseNetwork, LabeledDataset, ShapeError


class NumericalFailure(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    seed: int = 0
    freeze_zero_blocks: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("hyperparameters must be nonnegative (batch size positive)")


def init_network(
    dims: Sequence[int], activation: ActivationKind, seed: int = 0
) -> DenseNetwork:
    """Seeded uniform initialization in +-sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNetwork(
        input_dim=dims[0],
        hidden_dims=tuple(dims[1:-1]),
        output_dim=dims[-1],
        weights=tuple(weights),
        biases=tuple(biases),
        activation=activation,
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_gradients(
    weights: List[np.ndarray],
    biases: List[np.ndarray],
    activation: ActivationKind,
    inputs: np.ndarray,
    labels: np.ndarray,
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean cross-entropy and its gradients by reverse accumulation."""
    n = inputs.shape[0]
    last = len(weights) - 1
    hs = [inputs]  # post-activation states
    derivs = []  # activation derivatives at the hidden pre-activations
    h = inputs
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        if l < last:
            h, d = activation.value_and_derivative(z)
            derivs.append(d)
        else:
            h = z
        hs.append(h)
    probs = _softmax(hs[-1])
    eps = 1e-300  # guards log(0); softmax rows are positive anyway
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + eps)))
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    for l in range(last, -1, -1):
        grads_w[l] = delta.T @ hs[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * derivs[l - 1]
    return loss, grads_w, grads_b


def _run_adam(
    weights: List[np.ndarray],
    biases: List[np.ndarray],
    activation: ActivationKind,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    masks: Optional[List[np.ndarray]],
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    rng = np.random.default_rng(cfg.seed)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    step = 0
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, gw, gb = loss_and_gradients(
                weights, biases, activation, dataset.inputs[batch], dataset.labels[batch]
            )
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at step {step}: {loss}")
            if masks is not None:
                for g, mask in zip(gw, masks):
                    g *= mask
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for l in range(len(weights)):
                for param, m, v, g in (
                    (weights[l], m_w[l], v_w[l], gw[l]),
                    (biases[l], m_b[l], v_b[l], gb[l]),
                ):
                    m *= cfg.beta1
                    m += (1 - cfg.beta1) * g
                    v *= cfg.beta2
                    v += (1 - cfg.beta2) * g**2
                    param -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return weights, biases


def train_mlp(dims: Sequence[int], dataset: LabeledDataset, cfg: TrainConfig) -> DenseNetwork:
    """Train a fresh MLP of the given dimension chain on the dataset."""
    if dims[0] != dataset.inputs.shape[1]:
        raise ShapeError("input dimension does not match the dataset")
    if dataset.labels.max() >= dims[-1]:
        raise ShapeError("a label exceeds the output dimension")
    net = init_network(dims, ActivationKind.GELU, seed=cfg.seed)
    return fine_tune(net, dataset, cfg)


def fine_tune(net: DenseNetwork, dataset: LabeledDataset, cfg: TrainConfig) -> DenseNetwork:
    """Continue training an existing network.

    With freeze_zero_blocks set, gradients on entries that are exactly zero
    at entry are masked, so constructed zero blocks stay bitwise zero and
    the nonzero parameter count cannot grow.
    """
    if net.input_dim != dataset.inputs.shape[1]:
        raise ShapeError("input dimension does not match the dataset")
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    masks = [(w != 0.0).astype(np.float64) for w in weights] if cfg.freeze_zero_blocks else None
    weights, biases = _run_adam(weights, biases, net.activation, dataset, cfg, masks)
    return DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=net.hidden_dims,
        output_dim=net.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net.activation,
    )


def gradient_check(
    net: DenseNetwork,
    batch: np.ndarray,
    labels: Optional[np.ndarray] = None,
    samples: int = 20,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Relative error of analytic vs central-difference gradients.

    Coordinates are sampled across all weight matrices and biases; labels
    default to class 0 for every row.  The error is the largest
    coordinatewise deviation relative to the largest sampled gradient
    magnitude, so coordinates whose true gradient sits below the
    finite-difference noise floor do not dominate the report.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if labels is None:
        labels = np.zeros(batch.shape[0], dtype=np.int64)
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    _, gw, gb = loss_and_gradients(weights, biases, net.activation, batch, labels)
    rng = np.random.default_rng(seed)
    arrays = [(weights[l], gw[l]) for l in range(len(weights))]
    arrays += [(biases[l], gb[l]) for l in range(len(biases))]
    worst_abs = 0.0
    scale = 0.0
    for _ in range(samples):
        which = int(rng.integers(len(arrays)))
        arr, grad = arrays[which]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        up, _, _ = loss_and_gradients(weights, biases, net.activation, batch, labels)
        arr[idx] = orig - step
        down, _, _ = loss_and_gradients(weights, biases, net.activation, batch, labels)
        arr[idx] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = float(grad[idx])
        worst_abs = max(worst_abs, abs(analytic - numeric))
        scale = max(scale, abs(analytic), abs(numeric))
    return worst_abs / max(scale, 1e-8)
