import logging
from typing import Optional, Tuple, Union

import numpy as np

from lcar.common import TAU2_MAX
from lcar.errors import DimensionMismatch, IndexOutOfRange, MissingLogDetCache
from lcar.graph.adjacency import AdjacencyStructure, CandidateSequence, EdgeState
from lcar.model.data import ChainState

logger = logging.getLogger(__name__)

# Index standing for the global effect phi* in conditional queries.
GLOBAL_NODE = "global"

# Tolerance on the per-component sums of phi under the IAR sum-to-zero constraint.
CONSTRAINT_TOLERANCE = 1e-8


def lcar_quad_form(phi_extended: np.ndarray, edges: EdgeState, epsilon: float) -> float:
    """
    phi~' Q(W~, eps) phi~ for the extended vector (phi, phi*).

    Written as a sum of squared differences over the active edges and the global
    links plus the ridge term, so no matrix is assembled.
    """
    n = edges.base.n
    if phi_extended.shape != (n + 1,):
        raise DimensionMismatch(f"Extended effects of shape {phi_extended.shape}, expected ({n + 1},)")
    phi, phi_star = phi_extended[:n], phi_extended[n]
    kept = edges.base.edges[edges.active]
    local = np.sum((phi[kept[:, 0]] - phi[kept[:, 1]]) ** 2)
    linked = np.sum((phi[edges.global_links] - phi_star) ** 2)
    return float(local + linked + epsilon * np.dot(phi_extended, phi_extended))


def lcar_conditional_moments(
    phi_extended: np.ndarray,
    edges: EdgeState,
    epsilon: float,
    tau2: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Full-conditional means and variances of all n+1 extended effects at once."""
    n = edges.base.n
    phi, phi_star = phi_extended[:n], phi_extended[n]
    wstar = edges.global_links
    neighbour_sum = edges.matrix @ phi + wstar * phi_star
    weight = np.append(edges.degree + wstar, np.count_nonzero(wstar)) + epsilon
    numerator = np.append(neighbour_sum, np.sum(phi[wstar]))
    return numerator / weight, tau2 / weight


def lcar_phi_full_conditional(
    k: Union[int, str],
    state: ChainState,
    seq: CandidateSequence,
    epsilon: Optional[float] = None,
) -> Tuple[float, float]:
    """
    Mean and variance of phi_k (1-based unit, or GLOBAL_NODE for phi*) given all
    other extended effects, under candidate `state.candidate_j`.
    """
    epsilon = seq.epsilon if epsilon is None else epsilon
    edges = seq.candidate(state.candidate_j)
    mean, variance = lcar_conditional_moments(state.phi_extended, edges, epsilon, state.tau2)
    if k == GLOBAL_NODE:
        index = seq.base.n
    else:
        if not 1 <= k <= seq.base.n:
            raise IndexOutOfRange(f"Unit {k} outside 1..{seq.base.n}")
        index = k - 1
    return float(mean[index]), float(variance[index])


def _cached_logdet(seq: CandidateSequence, j: int, epsilon: float) -> float:
    if seq.precomputed_logdet is None:
        raise MissingLogDetCache("Candidate log-determinants have not been precomputed")
    if seq.epsilon is not None and not np.isclose(seq.epsilon, epsilon, rtol=1e-12, atol=0.0):
        raise MissingLogDetCache(
            f"Cached log-determinants are for epsilon={seq.epsilon}, requested {epsilon}"
        )
    if not 0 <= j <= seq.n_edges:
        raise IndexOutOfRange(f"Candidate index {j} outside 0..{seq.n_edges}")
    return float(seq.precomputed_logdet[j])


def lcar_joint_logprior(
    state: ChainState,
    seq: CandidateSequence,
    epsilon: Optional[float] = None,
) -> float:
    """log N(phi~; 0, tau2 Q(W~(j), eps)^-1) using the cached log-determinant."""
    epsilon = seq.epsilon if epsilon is None else epsilon
    logdet = _cached_logdet(seq, state.candidate_j, epsilon)
    quad = lcar_quad_form(state.phi_extended, seq.candidate(state.candidate_j), epsilon)
    dim = seq.base.n + 1
    return 0.5 * logdet - 0.5 * dim * np.log(2.0 * np.pi * state.tau2) - quad / (2.0 * state.tau2)


def iar_quad_form(phi: np.ndarray, adj: AdjacencyStructure) -> float:
    return float(np.sum((phi[adj.edges[:, 0]] - phi[adj.edges[:, 1]]) ** 2))


def iar_rank(adj: AdjacencyStructure) -> int:
    """Rank of diag(W1) - W: one null direction per connected component."""
    n_components, _ = adj.components
    return adj.n - n_components


def satisfies_constraint(phi: np.ndarray, adj: AdjacencyStructure) -> bool:
    _, labels = adj.components
    sums = np.bincount(labels, weights=phi)
    scale = max(1.0, float(np.max(np.abs(phi), initial=0.0)))
    return bool(np.all(np.abs(sums) <= CONSTRAINT_TOLERANCE * scale * adj.n))


def iar_logprior(state: ChainState, adj: AdjacencyStructure, constraint: bool = True) -> float:
    """
    Intrinsic CAR log-density with precision tau2^-1 (diag(W1) - W), up to an
    additive constant depending on W only.

    With `constraint`, phi must sum to zero on every connected component (islands
    are held at zero); any other phi has zero density.
    """
    if state.phi.shape != (adj.n,):
        raise DimensionMismatch(f"phi of shape {state.phi.shape} against {adj.n} units")
    if constraint and not satisfies_constraint(state.phi, adj):
        return -np.inf
    rank = iar_rank(adj)
    return -0.5 * rank * np.log(2.0 * np.pi * state.tau2) - iar_quad_form(state.phi, adj) / (2.0 * state.tau2)


def bym_logprior(state: ChainState, adj: AdjacencyStructure, constraint: bool = True) -> float:
    """IAR spatial effects plus independent theta_k ~ N(0, sigma2)."""
    theta = state.theta
    if theta is None or state.sigma2 is None:
        raise DimensionMismatch("BYM state needs theta and sigma2")
    independent = -0.5 * theta.size * np.log(2.0 * np.pi * state.sigma2) - np.dot(theta, theta) / (2.0 * state.sigma2)
    return iar_logprior(state, adj, constraint) + float(independent)


def iar_conditional_moments(phi: np.ndarray, adj: AdjacencyStructure, tau2: float) -> Tuple[np.ndarray, np.ndarray]:
    """Neighbour means and tau2/degree; islands get mean 0 and infinite variance."""
    degree = adj.degree.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(degree > 0, (adj.matrix @ phi) / degree, 0.0)
        variance = np.where(degree > 0, tau2 / degree, np.inf)
    return mean, variance


def iar_phi_full_conditional(k: int, state: ChainState, adj: AdjacencyStructure) -> Tuple[float, float]:
    if not 1 <= k <= adj.n:
        raise IndexOutOfRange(f"Unit {k} outside 1..{adj.n}")
    mean, variance = iar_conditional_moments(state.phi, adj, state.tau2)
    return float(mean[k - 1]), float(variance[k - 1])


def iar_partial_correlation(adj: AdjacencyStructure, k: int, j: int) -> float:
    """corr(phi_k, phi_j | rest) = w_kj / sqrt(d_k d_j) for 1-based units."""
    for unit in (k, j):
        if not 1 <= unit <= adj.n:
            raise IndexOutOfRange(f"Unit {unit} outside 1..{adj.n}")
    w = adj.matrix[k - 1, j - 1]
    if w == 0:
        return 0.0
    return float(w / np.sqrt(adj.degree[k - 1] * adj.degree[j - 1]))


def in_variance_support(value: float) -> bool:
    return 0.0 < value <= TAU2_MAX
