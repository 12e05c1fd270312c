"""Network fusion via (partial) optimal transport over neuron features.

Full fusion translates A's weights into B's coordinates with per-layer
kernels and interpolates.  Partial fusion matches only a mass fraction
(1 - alpha) of each layer, keeps the unmatched neurons verbatim, and
assembles a block weight matrix per layer whose zero blocks are exact.
"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import netcore
from .netcore import DenseNetwork, ShapeError
from .transport import (
    Coupling,
    DiscreteMeasure,
    KernelPair,
    PartialCoupling,
    cost_matrix,
    coupling_to_kernels,
    restrict_normalize_partial,
    solve_ot,
    solve_partial_ot,
)

# matched mass below this fraction of a neuron's budget counts as unmatched
MATCH_EPS = 1e-9


class FeatureKind(Enum):
    ACTIVATIONS = "activations"
    WEIGHTS = "weights"


class AlignMethod(Enum):
    GREEDY = "greedy"
    FIXED_POINT = "fixed-point"


class WeightDirection(Enum):
    OUTGOING = "outgoing"
    INCOMING = "incoming"


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.5
    alpha: Union[float, Sequence[float]] = 0.0
    features: FeatureKind = FeatureKind.WEIGHTS
    align: AlignMethod = AlignMethod.FIXED_POINT
    outer_iterations: int = 10
    activation_sample_count: int = 1000
    squared_step_costs: bool = False
    greedy_weight_direction: WeightDirection = WeightDirection.OUTGOING

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        if self.activation_sample_count < 1:
            raise ValueError("activation_sample_count must be >= 1")

    def alphas(self, num_hidden: int) -> Tuple[float, ...]:
        if np.isscalar(self.alpha):
            values = (float(self.alpha),) * num_hidden
        else:
            values = tuple(float(a) for a in self.alpha)
            if len(values) != num_hidden:
                raise ValueError(f"alpha list has {len(values)} entries, expected {num_hidden}")
        if any(not 0.0 <= a <= 1.0 for a in values):
            raise ValueError("every alpha must lie in [0, 1]")
        return values


@dataclass(frozen=True)
class SplitDirective:
    """One partially matched neuron replaced by a fused and an isolated copy."""

    side: str  # "A" or "B"
    layer: int
    index: int
    matched_mass: float
    total_mass: float


@dataclass(frozen=True)
class MatchPlan:
    """Partition of one layer into isolated/fused sets plus restricted kernels.

    Index sets refer to the (post-split) neurons of that layer; kernels are
    restricted to fused_b x fused_a.  Boundary layers are fully fused with
    identity kernels.
    """

    isolated_a: np.ndarray
    fused_a: np.ndarray
    isolated_b: np.ndarray
    fused_b: np.ndarray
    kernels: KernelPair
    split_directives: Tuple[SplitDirective, ...] = ()
    identity: bool = False  # boundary marker: kernels are exact identities

    def __post_init__(self):
        for name in ("isolated_a", "fused_a", "isolated_b", "fused_b"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for iso, fused, n in (
            (self.isolated_a, self.fused_a, self.n_a),
            (self.isolated_b, self.fused_b, self.n_b),
        ):
            all_idx = np.concatenate([iso, fused])
            if not np.array_equal(np.sort(all_idx), np.arange(n)):
                raise ShapeError("isolated and fused sets must partition the layer")
        if self.kernels.k_ab.shape != (len(self.fused_b), len(self.fused_a)):
            raise ShapeError("kernel shape does not match the fused sets")

    @property
    def n_a(self) -> int:
        return len(self.isolated_a) + len(self.fused_a)

    @property
    def n_b(self) -> int:
        return len(self.isolated_b) + len(self.fused_b)

    @property
    def fused_width(self) -> int:
        return len(self.isolated_a) + len(self.fused_b) + len(self.isolated_b)

    @classmethod
    def fully_fused(cls, kernels: KernelPair, identity: bool = False) -> "MatchPlan":
        n_b, n_a = kernels.k_ab.shape
        empty = np.empty(0, dtype=np.int64)
        return cls(
            isolated_a=empty,
            fused_a=np.arange(n_a),
            isolated_b=empty,
            fused_b=np.arange(n_b),
            kernels=kernels,
            identity=identity,
        )

    @classmethod
    def boundary(cls, n: int) -> "MatchPlan":
        return cls.fully_fused(KernelPair.identity(n), identity=True)


@dataclass(frozen=True)
class AlignResult:
    """Per-layer couplings plus the ascent trace of the alignment objective."""

    couplings: tuple
    objective_trace: Tuple[float, ...] = ()
    converged_sweep: Optional[int] = None


def _check_compatible(net_a: DenseNetwork, net_b: DenseNetwork):
    if (
        net_a.input_dim != net_b.input_dim
        or net_a.output_dim != net_b.output_dim
        or net_a.num_hidden != net_b.num_hidden
        or net_a.activation is not net_b.activation
    ):
        raise ShapeError("networks must share boundary dims, depth and activation")


# ---------------------------------------------------------------------------
# Features


def features_activation(
    net: DenseNetwork, data: np.ndarray, layer: int
) -> Tuple[np.ndarray, DiscreteMeasure]:
    """Neuron features from hidden activations: row i is neuron i's trace."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("activation features need a nonempty sample")
    acts = netcore.activations(net, data, layer)
    n = acts.shape[1]
    return acts.T.copy(), DiscreteMeasure.uniform(n)


def features_weight(
    net_a: DenseNetwork,
    net_b: DenseNetwork,
    kernels_above: Optional[KernelPair],
    layer: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Outgoing-weight features of hidden layer `layer`, mapped into B's world.

    A-feature i is column i of K_above^{A->B} @ W_a[layer]; B-features are
    the raw columns of W_b[layer].  Each neuron's incoming bias is appended
    as one extra coordinate so biased networks match on their full affine map.
    """
    if not 1 <= layer <= net_a.num_hidden:
        raise ShapeError(f"layer {layer} out of range")
    w_a, w_b = net_a.weights[layer], net_b.weights[layer]
    if kernels_above is None:
        moved = w_a
    else:
        moved = kernels_above.k_ab @ w_a
    if moved.shape[0] != w_b.shape[0]:
        raise ShapeError("transferred A-features do not live in B's output space")
    fa = np.column_stack([moved.T, net_a.biases[layer - 1]])
    fb = np.column_stack([w_b.T, net_b.biases[layer - 1]])
    return fa, fb


def _subsample(data: np.ndarray, count: int) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    return data[: min(count, data.shape[0])]


# ---------------------------------------------------------------------------
# Block kernels into the joint (isolated-A, fused-B, isolated-B) space


def _partition_from_partial(pt: PartialCoupling):
    matched_a = pt.matched_row_mass()
    matched_b = pt.matched_col_mass()
    mu = pt.row_marginal.masses
    nu = pt.col_marginal.masses
    iso_a = np.flatnonzero(matched_a <= MATCH_EPS * mu)
    iso_b = np.flatnonzero(matched_b <= MATCH_EPS * nu)
    fused_a = np.setdiff1d(np.arange(len(mu)), iso_a)
    fused_b = np.setdiff1d(np.arange(len(nu)), iso_b)
    return iso_a, fused_a, iso_b, fused_b


def _block_feature_kernels(pt: PartialCoupling):
    """Block embeddings of A's and B's neurons into the joint fused space.

    Rows are ordered (isolated_a, fused_b, isolated_b).  Fractionally
    matched neurons are treated as fused here; the hard split only happens
    when a final match plan is built.
    """
    iso_a, fused_a, iso_b, fused_b = _partition_from_partial(pt)
    n_a, n_b = pt.matrix.shape
    n_joint = len(iso_a) + len(fused_b) + len(iso_b)
    k_a2f = np.zeros((n_joint, n_a))
    k_b2f = np.zeros((n_joint, n_b))
    k_a2f[np.arange(len(iso_a)), iso_a] = 1.0
    lo = len(iso_a)
    if len(fused_a) and len(fused_b):
        sub = pt.matrix[np.ix_(fused_a, fused_b)]
        k_ab = (sub / sub.sum(axis=1)[:, None]).T  # columns sum to 1
        k_a2f[lo : lo + len(fused_b), fused_a] = k_ab
    k_b2f[lo + np.arange(len(fused_b)), fused_b] = 1.0
    k_b2f[lo + len(fused_b) + np.arange(len(iso_b)), iso_b] = 1.0
    return k_a2f, k_b2f


def _full_kernels_from(coupling) -> KernelPair:
    if isinstance(coupling, PartialCoupling):
        full = Coupling(coupling.matrix, coupling.row_marginal, coupling.col_marginal)
    else:
        full = coupling
    return coupling_to_kernels(full)


def _feature_embeddings(coupling, partial: bool):
    """(k_a2f, k_b2f) for building weight features above a solved layer."""
    if partial:
        return _block_feature_kernels(coupling)
    kp = _full_kernels_from(coupling)
    return kp.k_ab, np.eye(kp.k_ab.shape[0])


# ---------------------------------------------------------------------------
# Alignment


def _product_coupling(n_a: int, n_b: int, alpha: float, partial: bool):
    mu, nu = DiscreteMeasure.uniform(n_a), DiscreteMeasure.uniform(n_b)
    pi = np.full((n_a, n_b), 1.0 / (n_a * n_b))
    if partial:
        return PartialCoupling((1.0 - alpha) * pi, alpha, mu, nu)
    return Coupling(pi, mu, nu)


def _solve_layer(mu, nu, cost, alpha: float, partial: bool):
    if partial:
        return solve_partial_ot(mu, nu, cost, alpha)
    return solve_ot(mu, nu, cost)


def alignment_objective(net_a, net_b, couplings, partial: bool = False) -> float:
    """Global cross-layer inner-product objective of a set of couplings.

    Sums, over every weight matrix, the coupling-weighted inner products of
    outgoing-weight features (bias coordinate included); the shared input
    layer contributes through the identity coupling.  Fixed-point coordinate
    steps maximize exactly this, so it ascends monotonically in the full
    (alpha = 0) case.
    """
    L = net_a.num_hidden
    total = 0.0
    for l in range(L + 1):
        if l == L:
            k_a2f = np.eye(net_a.output_dim)
            k_b2f = k_a2f
        else:
            k_a2f, k_b2f = _feature_embeddings(couplings[l], partial)
        xa = k_a2f @ net_a.weights[l]
        xb = k_b2f @ net_b.weights[l]
        if l == 0:
            total += float(np.sum(xa * xb)) / net_a.input_dim
        else:
            reward = xa.T @ xb + np.outer(net_a.biases[l - 1], net_b.biases[l - 1])
            pi = couplings[l - 1].matrix
            total += float(np.sum(reward * pi))
    return total


def _fixed_point_rewards(net_a, net_b, couplings, layer: int, partial: bool) -> np.ndarray:
    """Linear reward for the coupling at `layer`, aggregating both adjacent terms."""
    L = net_a.num_hidden
    n_a_l = net_a.hidden_dims[layer - 1]
    # incoming term: layer-1 weights against the coupling below (the shared
    # input layer couples by the scaled identity)
    if layer == 1:
        reward = (n_a_l / net_a.input_dim) * (
            net_a.weights[0] @ net_b.weights[0].T
        )
    else:
        pi_below = couplings[layer - 2].matrix
        reward = n_a_l * (net_a.weights[layer - 1] @ pi_below @ net_b.weights[layer - 1].T)
    # outgoing term: features in the joint space above
    if layer == L:
        xa = net_a.weights[layer]
        xb = net_b.weights[layer]
    else:
        k_a2f, k_b2f = _feature_embeddings(couplings[layer], partial)
        xa = k_a2f @ net_a.weights[layer]
        xb = k_b2f @ net_b.weights[layer]
    reward = reward + xa.T @ xb
    reward = reward + np.outer(net_a.biases[layer - 1], net_b.biases[layer - 1])
    return reward


def _squared_step_cost(net_a, net_b, couplings, layer: int, partial: bool) -> np.ndarray:
    """Optional squared-distance step cost, each side scaled by 1/||W_b||_F."""
    L = net_a.num_hidden
    if layer == 1:
        t_a = np.eye(net_a.input_dim)
        t_b = np.eye(net_b.input_dim)
    else:
        t_a, t_b = _feature_embeddings(couplings[layer - 2], partial)
    a_in = np.column_stack(
        [net_a.weights[layer - 1] @ t_a.T, net_a.biases[layer - 1]]
    )
    b_in = np.column_stack(
        [net_b.weights[layer - 1] @ t_b.T, net_b.biases[layer - 1]]
    )
    if layer == L:
        xa, xb = net_a.weights[layer].T, net_b.weights[layer].T
    else:
        k_a2f, k_b2f = _feature_embeddings(couplings[layer], partial)
        xa = (k_a2f @ net_a.weights[layer]).T
        xb = (k_b2f @ net_b.weights[layer]).T
    s_in = 1.0 / max(np.linalg.norm(net_b.weights[layer - 1]), 1e-12)
    s_out = 1.0 / max(np.linalg.norm(net_b.weights[layer]), 1e-12)
    return s_in * cost_matrix(a_in, b_in) + s_out * cost_matrix(xa, xb)


def fixed_point_align(
    net_a: DenseNetwork,
    net_b: DenseNetwork,
    cfg: FusionConfig,
    partial: bool = False,
    initial: Optional[Sequence] = None,
) -> AlignResult:
    """Coordinate ascent over per-layer couplings of the global objective.

    Couplings start from the product coupling (or `initial`, e.g. a greedy
    alignment to ascend from); sweeps visit layers in order and re-solve one
    (partial) transport problem each, holding the rest fixed.  Stops early
    once a sweep changes nothing.
    """
    _check_compatible(net_a, net_b)
    if cfg.features is not FeatureKind.WEIGHTS:
        raise ValueError("the fixed-point aligner requires weight features")
    L = net_a.num_hidden
    alphas = cfg.alphas(L) if partial else (0.0,) * L
    if initial is not None:
        if len(initial) != L:
            raise ShapeError("one initial coupling per hidden layer required")
        couplings = list(initial)
    else:
        couplings = [
            _product_coupling(net_a.hidden_dims[l], net_b.hidden_dims[l], alphas[l], partial)
            for l in range(L)
        ]
    trace = [alignment_objective(net_a, net_b, couplings, partial)]
    converged = None
    for sweep in range(1, cfg.outer_iterations + 1):
        changed = False
        for layer in range(1, L + 1):
            if cfg.squared_step_costs:
                cost = _squared_step_cost(net_a, net_b, couplings, layer, partial)
            else:
                cost = -_fixed_point_rewards(net_a, net_b, couplings, layer, partial)
            mu = couplings[layer - 1].row_marginal
            nu = couplings[layer - 1].col_marginal
            new = _solve_layer(mu, nu, cost, alphas[layer - 1], partial)
            if not np.array_equal(new.matrix, couplings[layer - 1].matrix):
                changed = True
            couplings[layer - 1] = new
            trace.append(alignment_objective(net_a, net_b, couplings, partial))
        if not changed:
            converged = sweep
            break
    return AlignResult(tuple(couplings), tuple(trace), converged)


def greedy_align(
    net_a: DenseNetwork,
    net_b: DenseNetwork,
    cfg: FusionConfig,
    data: Optional[np.ndarray] = None,
    partial: bool = False,
) -> AlignResult:
    """Single-pass alignment: every layer is solved once and never revisited.

    Activation features make the layers independent.  Weight features chain:
    the outgoing direction sweeps top-down through the kernel above each
    layer, the incoming direction sweeps bottom-up through the kernel below.
    """
    _check_compatible(net_a, net_b)
    L = net_a.num_hidden
    alphas = cfg.alphas(L) if partial else (0.0,) * L
    couplings: List = [None] * L

    if cfg.features is FeatureKind.ACTIVATIONS:
        if data is None:
            raise ValueError("activation features need a data sample")
        sample = _subsample(data, cfg.activation_sample_count)
        for layer in range(1, L + 1):
            fa, mu = features_activation(net_a, sample, layer)
            fb, nu = features_activation(net_b, sample, layer)
            cost = cost_matrix(fa, fb)
            couplings[layer - 1] = _solve_layer(mu, nu, cost, alphas[layer - 1], partial)
    elif cfg.greedy_weight_direction is WeightDirection.OUTGOING:
        for layer in range(L, 0, -1):
            if layer == L:
                xa, xb = net_a.weights[L], net_b.weights[L]
            else:
                k_a2f, k_b2f = _feature_embeddings(couplings[layer], partial)
                xa = k_a2f @ net_a.weights[layer]
                xb = k_b2f @ net_b.weights[layer]
            fa = np.column_stack([xa.T, net_a.biases[layer - 1]])
            fb = np.column_stack([xb.T, net_b.biases[layer - 1]])
            mu = DiscreteMeasure.uniform(net_a.hidden_dims[layer - 1])
            nu = DiscreteMeasure.uniform(net_b.hidden_dims[layer - 1])
            cost = cost_matrix(fa, fb)
            couplings[layer - 1] = _solve_layer(mu, nu, cost, alphas[layer - 1], partial)
    else:
        for layer in range(1, L + 1):
            if layer == 1:
                t_a = np.eye(net_a.input_dim)
                t_b = t_a
            else:
                t_a, t_b = _feature_embeddings(couplings[layer - 2], partial)
            fa = np.column_stack(
                [net_a.weights[layer - 1] @ t_a.T, net_a.biases[layer - 1]]
            )
            fb = np.column_stack(
                [net_b.weights[layer - 1] @ t_b.T, net_b.biases[layer - 1]]
            )
            mu = DiscreteMeasure.uniform(net_a.hidden_dims[layer - 1])
            nu = DiscreteMeasure.uniform(net_b.hidden_dims[layer - 1])
            cost = cost_matrix(fa, fb)
            couplings[layer - 1] = _solve_layer(mu, nu, cost, alphas[layer - 1], partial)

    return AlignResult(tuple(couplings))


def _align(net_a, net_b, cfg, data, partial: bool) -> AlignResult:
    if cfg.align is AlignMethod.FIXED_POINT:
        return fixed_point_align(net_a, net_b, cfg, partial=partial)
    return greedy_align(net_a, net_b, cfg, data=data, partial=partial)


# ---------------------------------------------------------------------------
# Splitting partially matched neurons


def split_partial_neuron(
    net: DenseNetwork, layer: int, index: int, kappa: float, mu_total: float,
    side: str = "A",
) -> Tuple[DenseNetwork, SplitDirective]:
    """Replace neuron `index` of hidden `layer` by a matched and a leftover copy.

    Both copies keep the original outgoing weights; their incoming weights
    and bias are scaled by kappa/mu and (mu-kappa)/mu.  For RELU networks
    the function is preserved exactly (positive homogeneity); for GELU it
    is an approximation.  The matched copy stays at `index`, the leftover
    copy is appended at the end of the layer.
    """
    if not 0.0 < kappa < mu_total:
        raise ValueError("kappa must be strictly between 0 and the neuron's mass")
    if not 1 <= layer <= net.num_hidden:
        raise ShapeError(f"layer {layer} out of range")
    n = net.hidden_dims[layer - 1]
    if not 0 <= index < n:
        raise ShapeError(f"index {index} out of range for width {n}")
    row_scale, col_dup, _ = _split_operators(n, [(index, kappa, mu_total)], None)
    weights = list(net.weights)
    biases = list(net.biases)
    weights[layer - 1] = row_scale @ weights[layer - 1]
    biases[layer - 1] = row_scale @ biases[layer - 1]
    weights[layer] = weights[layer] @ col_dup
    hidden = list(net.hidden_dims)
    hidden[layer - 1] = n + 1
    out = DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=tuple(hidden),
        output_dim=net.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net.activation,
    )
    return out, SplitDirective(side, layer, index, float(kappa), float(mu_total))


def _split_operators(n: int, splits, masses: Optional[np.ndarray]):
    """Row-scaling, column-duplication, and mass bookkeeping for a batch of splits.

    splits: list of (index, kappa, mu).  Matched copies keep their slot;
    leftover copies are appended in split order.
    """
    extra = len(splits)
    row_scale = np.zeros((n + extra, n))
    col_dup = np.zeros((n, n + extra))
    new_mass = None
    if masses is not None:
        new_mass = np.concatenate([masses.copy(), np.zeros(extra)])
    row_scale[np.arange(n), np.arange(n)] = 1.0
    col_dup[np.arange(n), np.arange(n)] = 1.0
    for k, (idx, kappa, mu) in enumerate(splits):
        frac = kappa / mu
        row_scale[idx, idx] = frac
        row_scale[n + k, idx] = 1.0 - frac
        col_dup[idx, n + k] = 1.0
        if new_mass is not None:
            new_mass[idx] = kappa
            new_mass[n + k] = mu - kappa
    return row_scale, col_dup, new_mass


# ---------------------------------------------------------------------------
# Plans and assembly


def _expand_side(matched: np.ndarray, masses: np.ndarray):
    """Classify neurons and list the splits a fractional matching requires."""
    splits = []
    for i, (kappa, mu) in enumerate(zip(matched, masses)):
        if kappa > MATCH_EPS * mu and mu - kappa > MATCH_EPS * mu:
            splits.append((i, float(kappa), float(mu)))
    return splits


def build_match_plan(pt: PartialCoupling, layer: int):
    """Split fractionally matched neurons, partition, and restrict kernels.

    Returns (plan, row_ops_a, col_ops_a, row_ops_b, col_ops_b) where the ops
    are the (row_scale, col_dup) expansion operators for each network.
    """
    mu = pt.row_marginal.masses
    nu = pt.col_marginal.masses
    splits_a = _expand_side(pt.matched_row_mass(), mu)
    splits_b = _expand_side(pt.matched_col_mass(), nu)
    rs_a, cd_a, mass_a = _split_operators(len(mu), splits_a, mu)
    rs_b, cd_b, mass_b = _split_operators(len(nu), splits_b, nu)
    # matched copies keep their slot's row/column; leftover copies carry none
    pi = np.zeros((rs_a.shape[0], rs_b.shape[0]))
    pi[: len(mu), : len(nu)] = pt.matrix
    expanded = PartialCoupling(pi, pt.alpha, DiscreteMeasure(mass_a), DiscreteMeasure(mass_b))
    iso_a, fused_a, iso_b, fused_b = _partition_from_partial(expanded)
    directives = tuple(
        SplitDirective("A", layer, i, kappa, mu_i) for i, kappa, mu_i in splits_a
    ) + tuple(SplitDirective("B", layer, i, kappa, mu_i) for i, kappa, mu_i in splits_b)
    if len(fused_a) == 0:
        kernels = KernelPair(np.zeros((0, 0)), np.zeros((0, 0)))
    elif len(iso_a) == 0 and len(iso_b) == 0 and not directives:
        # nothing isolated: plain full coupling against its nominal marginals
        kernels = coupling_to_kernels(
            Coupling(expanded.matrix, expanded.row_marginal, expanded.col_marginal)
        )
    else:
        kernels = coupling_to_kernels(
            restrict_normalize_partial(expanded, iso_a.tolist(), iso_b.tolist())
        )
    plan = MatchPlan(
        isolated_a=iso_a,
        fused_a=fused_a,
        isolated_b=iso_b,
        fused_b=fused_b,
        kernels=kernels,
        split_directives=directives,
    )
    return plan, (rs_a, cd_a), (rs_b, cd_b)


def assemble_partial_layer(
    w_a: np.ndarray,
    w_b: np.ndarray,
    b_a: np.ndarray,
    b_b: np.ndarray,
    plan_in: MatchPlan,
    plan_out: MatchPlan,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One partially fused layer: block rows (iso_A, fused_B, iso_B).

    The two zero blocks (isolated A from isolated B and vice versa) are
    stored as exact zeros.  The interpolation factor applies exactly where
    mass enters the fused part.
    """
    if w_a.shape != (plan_out.n_a, plan_in.n_a) or w_b.shape != (plan_out.n_b, plan_in.n_b):
        raise ShapeError("weight shapes do not match the plans")
    ia_o, fa_o = plan_out.isolated_a, plan_out.fused_a
    ib_o, fb_o = plan_out.isolated_b, plan_out.fused_b
    ia_i, fa_i = plan_in.isolated_a, plan_in.fused_a
    ib_i, fb_i = plan_in.isolated_b, plan_in.fused_b
    k_out = plan_out.kernels.k_ab  # |F_B^out| x |F_A^out|
    k_in = plan_in.kernels.k_ba  # |F_A^in| x |F_B^in|
    pa, pf, pb = len(ia_o), len(fb_o), len(ib_o)
    qa, qf, qb = len(ia_i), len(fb_i), len(ib_i)
    out = np.zeros((pa + pf + pb, qa + qf + qb))
    rows_f = slice(pa, pa + pf)
    cols_f = slice(qa, qa + qf)

    out[:pa, :qa] = w_a[np.ix_(ia_o, ia_i)]
    mid_a_cols = w_a[np.ix_(ia_o, fa_i)]
    out[:pa, cols_f] = mid_a_cols if plan_in.identity else mid_a_cols @ k_in

    moved = w_a[np.ix_(fa_o, ia_i)]
    out[rows_f, :qa] = lam * (moved if plan_out.identity else k_out @ moved)
    core = w_a[np.ix_(fa_o, fa_i)]
    if not plan_out.identity:
        core = k_out @ core
    if not plan_in.identity:
        core = core @ k_in
    out[rows_f, cols_f] = (1.0 - lam) * w_b[np.ix_(fb_o, fb_i)] + lam * core
    out[rows_f, qa + qf :] = (1.0 - lam) * w_b[np.ix_(fb_o, ib_i)]

    out[pa + pf :, cols_f] = w_b[np.ix_(ib_o, fb_i)]
    out[pa + pf :, qa + qf :] = w_b[np.ix_(ib_o, ib_i)]

    moved_bias = b_a[fa_o] if plan_out.identity else k_out @ b_a[fa_o]
    bias = np.concatenate(
        [b_a[ia_o], (1.0 - lam) * b_b[fb_o] + lam * moved_bias, b_b[ib_o]]
    )
    return out, bias


def _expand_network(net: DenseNetwork, ops_per_layer) -> DenseNetwork:
    """Apply split operators (row_scale, col_dup per hidden layer) to a network."""
    weights = list(net.weights)
    biases = list(net.biases)
    hidden = list(net.hidden_dims)
    for layer, (row_scale, col_dup) in enumerate(ops_per_layer, start=1):
        if row_scale.shape[0] == row_scale.shape[1]:
            continue  # no splits at this layer
        weights[layer - 1] = row_scale @ weights[layer - 1]
        biases[layer - 1] = row_scale @ biases[layer - 1]
        weights[layer] = weights[layer] @ col_dup
        hidden[layer - 1] = row_scale.shape[0]
    return DenseNetwork(
        input_dim=net.input_dim,
        hidden_dims=tuple(hidden),
        output_dim=net.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net.activation,
    )


def _assemble(net_a: DenseNetwork, net_b: DenseNetwork, plans: Sequence[MatchPlan], lam: float) -> DenseNetwork:
    L = net_a.num_hidden
    chain = [MatchPlan.boundary(net_a.input_dim), *plans, MatchPlan.boundary(net_a.output_dim)]
    weights, biases = [], []
    for l in range(L + 1):
        w, b = assemble_partial_layer(
            net_a.weights[l],
            net_b.weights[l],
            net_a.biases[l],
            net_b.biases[l],
            chain[l],
            chain[l + 1],
            lam,
        )
        weights.append(w)
        biases.append(b)
    return DenseNetwork(
        input_dim=net_a.input_dim,
        hidden_dims=tuple(p.fused_width for p in plans),
        output_dim=net_a.output_dim,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=net_a.activation,
    )


def ot_fuse(
    net_a: DenseNetwork,
    net_b: DenseNetwork,
    cfg: FusionConfig,
    data: Optional[np.ndarray] = None,
) -> DenseNetwork:
    """Full fusion into B's shape: W_c = (1-lam) W_b + lam K W_a K per layer."""
    _check_compatible(net_a, net_b)
    result = _align(net_a, net_b, replace(cfg, alpha=0.0), data, partial=False)
    plans = [MatchPlan.fully_fused(_full_kernels_from(c)) for c in result.couplings]
    return _assemble(net_a, net_b, plans, cfg.lam)


def partial_fuse(
    net_a: DenseNetwork,
    net_b: DenseNetwork,
    cfg: FusionConfig,
    data: Optional[np.ndarray] = None,
) -> DenseNetwork:
    """Partially fuse two networks, leaving unmatched neurons isolated.

    Hidden layer l of the result has |I_A| + |F_B| + |I_B| neurons, about
    (1 + alpha_l) times the parent width.  alpha = 0 reduces to ot_fuse;
    alpha = 1 reproduces the ensemble as a function.
    """
    _check_compatible(net_a, net_b)
    result = _align(net_a, net_b, cfg, data, partial=True)
    plans, ops_a, ops_b = [], [], []
    for layer, pt in enumerate(result.couplings, start=1):
        plan, op_a, op_b = build_match_plan(pt, layer)
        plans.append(plan)
        ops_a.append(op_a)
        ops_b.append(op_b)
    exp_a = _expand_network(net_a, ops_a)
    exp_b = _expand_network(net_b, ops_b)
    return _assemble(exp_a, exp_b, plans, cfg.lam)
