"""Exact discrete optimal transport, partial transport, and coupling kernels.

Marginal masses are snapped to a common integer denominator and the
transport problem is solved as an integral min-cost flow (successive
shortest paths with node potentials), so returned objectives are exact
minima rather than floating-point approximations.
"""

import itertools
from dataclasses import dataclass
from fractions import Fraction
from math import gcd
from typing import Sequence, Tuple

import numpy as np

from .netcore import ShapeError

MARGINAL_TOL = 1e-9


class DegenerateNeuronError(ValueError):
    """A marginal entry is zero; the caller must split or drop it first."""


class EnumerationError(ValueError):
    """Brute-force instance too large to enumerate."""


@dataclass(frozen=True)
class DiscreteMeasure:
    """Nonnegative masses on the neurons of one layer."""

    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=np.float64)
        if m.ndim != 1:
            raise ShapeError("masses must be a vector")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValueError("masses must be finite and nonnegative")
        if m.sum() <= 0:
            raise ValueError("total mass must be positive")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "masses", m)

    @classmethod
    def uniform(cls, n: int) -> "DiscreteMeasure":
        return cls(np.full(n, 1.0 / n))

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def __len__(self) -> int:
        return self.masses.shape[0]


@dataclass(frozen=True)
class Coupling:
    """Transport plan whose row/column sums equal the two marginals."""

    matrix: np.ndarray
    row_marginal: DiscreteMeasure
    col_marginal: DiscreteMeasure

    def __post_init__(self):
        pi = np.asarray(self.matrix, dtype=np.float64)
        if pi.shape != (len(self.row_marginal), len(self.col_marginal)):
            raise ShapeError("coupling shape does not match its marginals")
        if pi.size and pi.min() < 0:
            raise ValueError("coupling has negative entries")
        if pi.size:
            if np.abs(pi.sum(axis=1) - self.row_marginal.masses).max() > MARGINAL_TOL:
                raise ValueError("row sums deviate from the row marginal")
            if np.abs(pi.sum(axis=0) - self.col_marginal.masses).max() > MARGINAL_TOL:
                raise ValueError("column sums deviate from the column marginal")
        pi = pi.copy()
        pi.flags.writeable = False
        object.__setattr__(self, "matrix", pi)


@dataclass(frozen=True)
class PartialCoupling:
    """Sub-coupling transporting total mass (1 - alpha) * total."""

    matrix: np.ndarray
    alpha: float
    row_marginal: DiscreteMeasure
    col_marginal: DiscreteMeasure

    def __post_init__(self):
        pi = np.asarray(self.matrix, dtype=np.float64)
        if pi.shape != (len(self.row_marginal), len(self.col_marginal)):
            raise ShapeError("partial coupling shape does not match its marginals")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if pi.size and pi.min() < 0:
            raise ValueError("partial coupling has negative entries")
        if np.any(pi.sum(axis=1) > self.row_marginal.masses + MARGINAL_TOL):
            raise ValueError("a row sum exceeds the row marginal")
        if np.any(pi.sum(axis=0) > self.col_marginal.masses + MARGINAL_TOL):
            raise ValueError("a column sum exceeds the column marginal")
        want = (1.0 - self.alpha) * self.row_marginal.total
        if abs(pi.sum() - want) > MARGINAL_TOL:
            raise ValueError(f"total transported mass {pi.sum()} != {want}")
        pi = pi.copy()
        pi.flags.writeable = False
        object.__setattr__(self, "matrix", pi)

    def matched_row_mass(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def matched_col_mass(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


@dataclass(frozen=True)
class KernelPair:
    """Column-stochastic layer translations K_ab: A -> B and K_ba: B -> A."""

    k_ab: np.ndarray
    k_ba: np.ndarray

    def __post_init__(self):
        k_ab = np.asarray(self.k_ab, dtype=np.float64)
        k_ba = np.asarray(self.k_ba, dtype=np.float64)
        if k_ab.shape != k_ba.shape[::-1]:
            raise ShapeError("kernel shapes must be mutual transposes")
        for name, k in (("k_ab", k_ab), ("k_ba", k_ba)):
            if k.size == 0:
                continue
            if k.min() < 0:
                raise ValueError(f"{name} has negative entries")
            if np.abs(k.sum(axis=0) - 1.0).max() > MARGINAL_TOL:
                raise ValueError(f"{name} columns do not sum to 1")
        object.__setattr__(self, "k_ab", k_ab)
        object.__setattr__(self, "k_ba", k_ba)

    @classmethod
    def identity(cls, n: int) -> "KernelPair":
        return cls(np.eye(n), np.eye(n))


def cost_matrix(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between feature rows."""
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1]:
        raise ShapeError("feature matrices must share their coordinate dimension")
    sq_a = np.einsum("ij,ij->i", xa, xa)
    sq_b = np.einsum("ij,ij->i", xb, xb)
    d = sq_a[:, None] - 2.0 * (xa @ xb.T) + sq_b[None, :]
    return np.maximum(d, 0.0)


# ---------------------------------------------------------------------------
# Integral reformulation


def _rationalize(masses: np.ndarray, max_denominator: int = 10**6) -> Sequence[Fraction]:
    fracs = [Fraction(float(m)).limit_denominator(max_denominator) for m in masses]
    err = max((abs(float(f) - float(m)) for f, m in zip(fracs, masses)), default=0.0)
    if err > MARGINAL_TOL:
        raise ValueError("masses do not admit an exact small-denominator representation")
    return fracs


def _integerize_pair(mu: np.ndarray, nu: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Scale both mass vectors to integers over one common denominator."""
    fa = _rationalize(mu)
    fb = _rationalize(nu)
    den = 1
    for f in itertools.chain(fa, fb):
        den = den * f.denominator // gcd(den, f.denominator)
        if den > 10**9:
            raise ValueError("common denominator of the marginal masses is too large")
    sup = np.array([int(f * den) for f in fa], dtype=np.int64)
    dem = np.array([int(f * den) for f in fb], dtype=np.int64)
    if sup.sum() != dem.sum():
        raise ValueError("marginal totals are not balanced")
    return sup, dem, den


def _min_cost_flow(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Integral min-cost transportation via successive shortest paths.

    Node potentials keep reduced costs nonnegative so plain Dijkstra
    suffices; ties always resolve to the lowest node index, which makes
    the returned flow deterministic.
    """
    n_a, n_b = cost.shape
    c = cost - min(0.0, float(cost.min()))  # nonnegative, same minimizers
    flow = np.zeros((n_a, n_b), dtype=np.int64)
    rem_s = supply.astype(np.int64).copy()
    rem_d = demand.astype(np.int64).copy()
    pot_a = np.zeros(n_a)
    pot_b = np.zeros(n_b)
    inf = np.inf

    while rem_s.sum() > 0:
        dist_a = np.where(rem_s > 0, 0.0, inf)
        dist_b = np.full(n_b, inf)
        par_b = np.full(n_b, -1, dtype=np.int64)  # A-node feeding each B-node
        par_a = np.full(n_a, -1, dtype=np.int64)  # B-node feeding each A-node
        done_a = np.zeros(n_a, dtype=bool)
        done_b = np.zeros(n_b, dtype=bool)
        target = -1
        while True:
            da = np.where(done_a, inf, dist_a)
            ia = int(np.argmin(da))
            db = np.where(done_b, inf, dist_b)
            ib = int(np.argmin(db))
            if da[ia] >= inf and db[ib] >= inf:
                break
            if da[ia] <= db[ib]:
                done_a[ia] = True
                nd = da[ia] + c[ia] + pot_a[ia] - pot_b
                # never relax into finished nodes: rounding noise on tight
                # arcs could otherwise rewrite their parents and knot the
                # walk-back path into a cycle
                better = (nd < dist_b) & ~done_b
                if better.any():
                    dist_b[better] = nd[better]
                    par_b[better] = ia
            else:
                if rem_d[ib] > 0:
                    target = ib
                    break
                done_b[ib] = True
                back = flow[:, ib] > 0
                if back.any():
                    nd = np.where(back, db[ib] - c[:, ib] + pot_b[ib] - pot_a, inf)
                    better = (nd < dist_a) & ~done_a
                    if better.any():
                        dist_a[better] = nd[better]
                        par_a[better] = ib
        if target < 0:
            raise RuntimeError("flow network disconnected; marginals inconsistent")

        # walk back to a source, recording arcs and the bottleneck
        d_t = dist_b[target]
        path = []  # (i, j, forward?)
        j = target
        delta = rem_d[target]
        while True:
            i = int(par_b[j])
            path.append((i, j, True))
            if par_a[i] < 0:
                delta = min(delta, rem_s[i])
                break
            jprev = int(par_a[i])
            path.append((i, jprev, False))
            delta = min(delta, flow[i, jprev])
            j = jprev
        for i, jj, forward in path:
            if forward:
                flow[i, jj] += delta
            else:
                flow[i, jj] -= delta
        src = path[-1][0]
        rem_s[src] -= delta
        rem_d[target] -= delta
        pot_a += np.minimum(dist_a, d_t)
        pot_b += np.minimum(dist_b, d_t)
    return flow


def _check_cost(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (len(mu), len(nu)):
        raise ShapeError("cost matrix shape does not match the marginals")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    return cost


def solve_ot(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray) -> Coupling:
    """Exact minimizer of <cost, pi> over couplings of mu and nu."""
    cost = _check_cost(mu, nu, cost)
    if abs(mu.total - nu.total) > 1e-12:
        raise ValueError("marginal totals differ")
    sup, dem, den = _integerize_pair(mu.masses, nu.masses)
    flow = _min_cost_flow(sup, dem, cost)
    return Coupling(flow / den, mu, nu)


def transport_objective(coupling_matrix: np.ndarray, cost: np.ndarray) -> float:
    return float(np.sum(np.asarray(coupling_matrix) * np.asarray(cost)))


def solve_partial_ot(
    mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray, alpha: float
) -> PartialCoupling:
    """Exact minimizer over couplings transporting mass (1 - alpha) * total.

    Balanced reduction: a virtual point of mass alpha * total joins each
    side, absorbing unmatched mass at zero cost; virtual-to-virtual routing
    costs max(cost) + 1 so no optimal plan ever uses it.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    cost = _check_cost(mu, nu, cost)
    if abs(mu.total - nu.total) > 1e-12:
        raise ValueError("marginal totals differ")
    if alpha == 0.0:
        full = solve_ot(mu, nu, cost)
        return PartialCoupling(full.matrix, 0.0, mu, nu)
    if alpha == 1.0:
        return PartialCoupling(np.zeros((len(mu), len(nu))), 1.0, mu, nu)

    frac_alpha = Fraction(float(alpha)).limit_denominator(10**6)
    if abs(float(frac_alpha) - alpha) > MARGINAL_TOL:
        raise ValueError("alpha does not admit an exact rational representation")
    # shifting all real-to-real costs is argmin-preserving here because the
    # transported total is fixed; it keeps max(cost)+1 a dominating penalty
    # even when the caller passes negative (reward-derived) costs
    if cost.size and cost.min() < 0.0:
        cost = cost - cost.min()
    fa = _rationalize(mu.masses)
    fb = _rationalize(nu.masses)
    virtual = frac_alpha * sum(fa)
    den = virtual.denominator
    for f in itertools.chain(fa, fb):
        den = den * f.denominator // gcd(den, f.denominator)
        if den > 10**9:
            raise ValueError("common denominator of the marginal masses is too large")
    sup = np.array([int(f * den) for f in fa] + [int(virtual * den)], dtype=np.int64)
    dem = np.array([int(f * den) for f in fb] + [int(virtual * den)], dtype=np.int64)
    big = float(cost.max()) + 1.0
    ext = np.zeros((len(mu) + 1, len(nu) + 1))
    ext[: len(mu), : len(nu)] = cost
    ext[-1, -1] = big
    flow = _min_cost_flow(sup, dem, ext)
    return PartialCoupling(flow[: len(mu), : len(nu)] / den, alpha, mu, nu)


def coupling_to_kernels(coupling: Coupling) -> KernelPair:
    """Disintegrate a coupling into its two column-stochastic kernels."""
    mu = coupling.row_marginal.masses
    nu = coupling.col_marginal.masses
    if (mu.size and mu.min() <= 0.0) or (nu.size and nu.min() <= 0.0):
        raise DegenerateNeuronError(
            "zero-mass marginal entry; split or drop the neuron before building kernels"
        )
    pi = coupling.matrix
    return KernelPair(k_ab=(pi / mu[:, None]).T, k_ba=pi / nu[None, :])


def restrict_normalize_partial(
    partial: PartialCoupling,
    isolated_a: Sequence[int],
    isolated_b: Sequence[int],
) -> Coupling:
    """Drop isolated rows/columns and renormalize the rest to a full coupling.

    The restricted coupling's own row/column sums become the new marginals.
    """
    n_a, n_b = partial.matrix.shape
    iso_a = np.asarray(sorted(isolated_a), dtype=np.int64)
    iso_b = np.asarray(sorted(isolated_b), dtype=np.int64)
    if iso_a.size and partial.matrix[iso_a, :].sum() > MARGINAL_TOL:
        raise ValueError("an isolated row carries transported mass")
    if iso_b.size and partial.matrix[:, iso_b].sum() > MARGINAL_TOL:
        raise ValueError("an isolated column carries transported mass")
    keep_a = np.setdiff1d(np.arange(n_a), iso_a)
    keep_b = np.setdiff1d(np.arange(n_b), iso_b)
    sub = partial.matrix[np.ix_(keep_a, keep_b)]
    if sub.size == 0:
        empty = sub.reshape(len(keep_a), len(keep_b))
        raise DegenerateNeuronError(
            f"restriction to fused neurons is empty ({empty.shape})"
        )
    if iso_a.size or iso_b.size:
        sub = sub / sub.sum()
    return Coupling(
        sub,
        DiscreteMeasure(sub.sum(axis=1)),
        DiscreteMeasure(sub.sum(axis=0)),
    )


# ---------------------------------------------------------------------------
# Exhaustive oracle


def brute_force_ot(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: np.ndarray,
    node_limit: int = 2_000_000,
) -> Tuple[float, np.ndarray]:
    """Provably optimal objective by enumerating integral transport plans."""
    cost = _check_cost(mu, nu, cost)
    if abs(mu.total - nu.total) > 1e-12:
        raise ValueError("marginal totals differ")
    sup, dem, den = _integerize_pair(mu.masses, nu.masses)
    n_a, n_b = cost.shape

    # uniform equal-size case: the vertices are exactly the permutations
    if n_a == n_b and len(set(sup.tolist()) | set(dem.tolist())) == 1:
        if n_a > 9:
            raise EnumerationError("too many permutations to enumerate")
        unit = sup[0] / den
        best_perm, best_val = None, np.inf
        for perm in itertools.permutations(range(n_a)):
            val = sum(cost[i, perm[i]] for i in range(n_a))
            if val < best_val:
                best_val, best_perm = val, perm
        plan = np.zeros((n_a, n_b))
        for i, j in enumerate(best_perm):
            plan[i, j] = unit
        return float(best_val * unit), plan

    cells = [(i, j) for i in range(n_a) for j in range(n_b)]
    # nonnegative shift keeps the partial sum an admissible pruning bound
    shifted = cost - min(0.0, float(cost.min()))
    best = {"val": np.inf, "plan": None}
    nodes = {"count": 0}
    flow = np.zeros((n_a, n_b), dtype=np.int64)
    rem_r = sup.copy()
    rem_c = dem.copy()

    def rec(idx: int, cur: float):
        nodes["count"] += 1
        if nodes["count"] > node_limit:
            raise EnumerationError("instance too large to enumerate")
        if cur >= best["val"]:
            return
        if idx == len(cells):
            if rem_r.sum() == 0:
                best["val"] = cur
                best["plan"] = flow.copy()
            return
        i, j = cells[idx]
        # remaining columns in this row must be able to absorb what is left
        tail = int(rem_c[j + 1 :].sum()) if j + 1 < n_b else 0
        lo = max(0, int(rem_r[i]) - tail)
        hi = int(min(rem_r[i], rem_c[j]))
        for f in range(lo, hi + 1):
            flow[i, j] = f
            rem_r[i] -= f
            rem_c[j] -= f
            rec(idx + 1, cur + f * shifted[i, j])
            flow[i, j] = 0
            rem_r[i] += f
            rem_c[j] += f

    rec(0, 0.0)
    if best["plan"] is None:
        raise RuntimeError("no feasible plan found")
    plan = best["plan"] / den
    return transport_objective(plan, cost), plan
