import numpy as np
import pytest

from partfuse import ActivationKind, DenseNetwork
from partfuse.train import init_network


def rand_net(dims, activation=ActivationKind.GELU, seed=0, bias_scale=0.1):
    """Random network with generic (nonzero) biases."""
    net = init_network(dims, activation, seed=seed)
    rng = np.random.default_rng(seed + 977)
    biases = tuple(bias_scale * rng.standard_normal(b.shape) for b in net.biases)
    return DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=net.hidden_dims,
        output_dim=net.output_dim,
        weights=net.weights,
        biases=biases,
        activation=activation,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
