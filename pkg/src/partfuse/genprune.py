"""Generalized pruning: kernel-sandwich compression of a network or ensemble.

Every method here produces a smaller network S from a larger one E by
W_S[l] = K_es[l+1] @ W_E[l] @ K_se[l]; deleting neurons, averaging
clusters, and partial fusion are all instances of the kernel choice.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from . import clustering as clst
from . import fusion as fus
from .netcore import DenseNetwork, ShapeError
from .transport import DiscreteMeasure, KernelPair

_MASS_FLOOR = 1e-9  # keeps lam-weighted masses positive at the lam = 0, 1 endpoints


class PruneMethod(Enum):
    CLUSTER = "cluster"
    UNSTRUCTURED = "prune"
    UNSTRUCTURED_POSTPROCESS = "prune-post"


@dataclass(frozen=True)
class PruneSpec:
    """Target widths per hidden layer plus the compression method."""

    target_widths: Tuple[int, ...]
    method: PruneMethod = PruneMethod.UNSTRUCTURED
    lam: Optional[float] = None  # provenance weighting for ensembles
    outgoing_importance: bool = False

    def __post_init__(self):
        object.__setattr__(self, "target_widths", tuple(int(m) for m in self.target_widths))
        if any(m < 1 for m in self.target_widths):
            raise ValueError("target widths must be positive")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    def check_against(self, net: DenseNetwork):
        if len(self.target_widths) != net.num_hidden:
            raise ShapeError("one target width per hidden layer required")
        for m, n in zip(self.target_widths, net.hidden_dims):
            if m > n:
                raise ValueError(f"target width {m} exceeds layer width {n}")


def _unpack_kernels(pair) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pair, KernelPair):
        return pair.k_ab, pair.k_ba
    k_es, k_se = pair
    return np.asarray(k_es, dtype=np.float64), np.asarray(k_se, dtype=np.float64)


def apply_generalized_pruning(net: DenseNetwork, kernels: Sequence) -> DenseNetwork:
    """Sandwich every weight matrix between per-layer kernels.

    kernels[l] is the (K_es, K_se) pair of hidden layer l+1 (a KernelPair or
    a plain matrix tuple; the partial-fusion kernels are not column
    stochastic).  Boundary layers use implicit identities.  Biases move by
    the left kernel alone.
    """
    if len(kernels) != net.num_hidden:
        raise ShapeError("one kernel pair per hidden layer required")
    pairs = [_unpack_kernels(p) for p in kernels]
    for (k_es, k_se), n in zip(pairs, net.hidden_dims):
        if k_es.shape[1] != n or k_se.shape[0] != n or k_es.shape[0] != k_se.shape[1]:
            raise ShapeError("kernel shapes do not chain with the network")
    weights, biases = [], []
    L = net.num_hidden
    for l in range(L + 1):
        w = net.weights[l]
        b = net.biases[l]
        if l > 0:
            w = w @ pairs[l - 1][1]
        if l < L:
            w = pairs[l][0] @ w
            b = pairs[l][0] @ b
        weights.append(w)
        biases.append(b)
    return DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=tuple(p[0].shape[0] for p in pairs),
        output_dim=net.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net.activation,
    )


def _provenance_factors(net: DenseNetwork, lam: float, layer: int) -> np.ndarray:
    """Per-neuron importance factors: lam for A-origin neurons, 1-lam for B."""
    if net.origins is None:
        raise ValueError("lam-weighted pruning needs a network with origin tags")
    origin = net.origins[layer - 1]
    factors = np.where(origin == 0, lam, 1.0 - lam)
    return np.maximum(factors, _MASS_FLOOR)


def cluster_prune(
    net: DenseNetwork,
    spec: PruneSpec,
    data: np.ndarray,
    restarts: int = 1000,
    temperature: float = 0.1,
    seed: int = 0,
    sample_count: int = 1000,
) -> DenseNetwork:
    """Compress by clustering activation features and averaging clusters.

    Masses are uniform, or scaled by the parents' interpolation weights when
    spec.lam is set (then renormalized), so a down-weighted parent's neurons
    are cheaper to distort.
    """
    spec.check_against(net)
    data = np.asarray(data, dtype=np.float64)[:sample_count]
    kernel_list = []
    for layer in range(1, net.num_hidden + 1):
        feats, mu = fus.features_activation(net, data, layer)
        if spec.lam is not None and spec.lam != 0.5:
            factors = _provenance_factors(net, spec.lam, layer)
            mu = DiscreteMeasure(factors / factors.sum())
        m = spec.target_widths[layer - 1]
        if m == len(mu):
            labels = np.arange(len(mu))
            assignment = clst._labels_to_assignment(feats, mu.masses, labels)
        else:
            assignment = clst.stochastic_ward(
                feats, mu, m, temperature=temperature, restarts=restarts, seed=seed
            )
        kernel_list.append(clst.assignment_to_kernels(assignment, mu))
    return apply_generalized_pruning(net, kernel_list)


def unstructured_prune(net: DenseNetwork, spec: PruneSpec) -> DenseNetwork:
    """Keep the top-m neurons per layer by L2 weight norm, delete the rest.

    Importance is the norm of the incoming weight row (outgoing column
    behind the flag), scaled by the provenance factor when spec.lam is set.
    Ties keep the lower index.
    """
    spec.check_against(net)
    # score every layer on the original matrices before any deletion
    keeps = []
    for layer in range(1, net.num_hidden + 1):
        if spec.outgoing_importance:
            scores = np.linalg.norm(net.weights[layer], axis=0)
        else:
            scores = np.linalg.norm(net.weights[layer - 1], axis=1)
        if spec.lam is not None and spec.lam != 0.5:
            scores = scores * _provenance_factors(net, spec.lam, layer)
        order = np.argsort(-scores, kind="stable")
        keeps.append(np.sort(order[: spec.target_widths[layer - 1]]))
    weights = list(net.weights)
    biases = list(net.biases)
    for layer, keep in enumerate(keeps, start=1):
        weights[layer - 1] = weights[layer - 1][keep, :]
        biases[layer - 1] = biases[layer - 1][keep]
        weights[layer] = weights[layer][:, keep]
    return DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=tuple(spec.target_widths),
        output_dim=net.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net.activation,
    )


def prune_with_postprocess(
    net: DenseNetwork,
    spec: PruneSpec,
    features: fus.FeatureKind = fus.FeatureKind.WEIGHTS,
    data: Optional[np.ndarray] = None,
    align: fus.AlignMethod = fus.AlignMethod.GREEDY,
) -> DenseNetwork:
    """Unstructured pruning followed by fusing the original onto the result.

    The original network is transported wholesale (interpolation weight 1)
    into the pruned architecture, so deleted neurons merge into survivors
    instead of disappearing.  Marginals are uniform on both sides.
    """
    pruned = unstructured_prune(net, spec)
    cfg = fus.FusionConfig(lam=1.0, alpha=0.0, features=features, align=align)
    return fus.ot_fuse(net, pruned, cfg, data=data)


def partial_fusion_as_pruning_kernels(
    plan: fus.MatchPlan, lam: float
) -> Tuple[np.ndarray, np.ndarray]:
    """The explicit kernel pair that turns ensemble pruning into partial fusion.

    Over ensemble blocks (I_A, F_A, F_B, I_B) and fused blocks (I_A, F_B, I_B):

        K_es = [[1, 0,          0,          0],       K_se = [[1, 0,    0],
                [0, lam * K_ab, (1-lam) 1,  0],               [0, K_ba, 0],
                [0, 0,          0,          1]]               [0, 1,    0],
                                                              [0, 0,    1]]

    composed with the permutation that sorts the concatenated (A then B)
    ensemble indices into that block order.
    """
    n_a, n_b = plan.n_a, plan.n_b
    n_e = n_a + n_b
    m = plan.fused_width
    k_ab, k_ba = plan.kernels.k_ab, plan.kernels.k_ba
    pa, pf, pb = len(plan.isolated_a), len(plan.fused_b), len(plan.isolated_b)
    fa = len(plan.fused_a)

    block_es = np.zeros((m, n_e))
    block_es[np.arange(pa), np.arange(pa)] = 1.0
    block_es[pa : pa + pf, pa : pa + fa] = lam * k_ab
    block_es[pa + np.arange(pf), pa + fa + np.arange(pf)] = 1.0 - lam
    block_es[pa + pf + np.arange(pb), pa + fa + pf + np.arange(pb)] = 1.0

    block_se = np.zeros((n_e, m))
    block_se[np.arange(pa), np.arange(pa)] = 1.0
    block_se[pa : pa + fa, pa : pa + pf] = k_ba
    block_se[pa + fa + np.arange(pf), pa + np.arange(pf)] = 1.0
    block_se[pa + fa + pf + np.arange(pb), pa + pf + np.arange(pb)] = 1.0

    order = np.concatenate(
        [plan.isolated_a, plan.fused_a, n_a + plan.fused_b, n_a + plan.isolated_b]
    )
    perm = np.zeros((n_e, n_e))
    perm[np.arange(n_e), order] = 1.0
    return block_es @ perm, perm.T @ block_se
