import logging
from functools import lru_cache
from typing import Optional, Union

import attrs
import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

try:
    from sksparse import cholmod
except ImportError:
    cholmod = None

from lcar.common import DIRECTION
from lcar.errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NonPositiveEpsilon,
    NotPositiveDefinite,
)
from lcar.graph.adjacency import (
    AdjacencyStructure,
    CandidateSequence,
    EdgeState,
    candidate,
)

logger = logging.getLogger(__name__)


@attrs.frozen(eq=False)
class PrecisionMatrix:
    """Q(W, eps) = diag(W1) - W + eps*I over the extended effects (phi, phi*)."""

    matrix: sparse.csc_matrix
    epsilon: float
    base: AdjacencyStructure

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def leading_block(self) -> "SubPrecision":
        n = self.dim - 1
        return SubPrecision(
            matrix=self.matrix[:n, :n].tocsc(), epsilon=self.epsilon, base=self.base
        )


@attrs.frozen(eq=False)
class SubPrecision:
    """The leading n x n block of Q(W, eps), i.e. without the global node."""

    matrix: sparse.csc_matrix
    epsilon: float
    base: AdjacencyStructure

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@lru_cache(maxsize=32)
def _sparsity_pattern(adj: AdjacencyStructure, include_global: bool) -> sparse.csc_matrix:
    # The full geography plus a dense global row is a superset of every
    # candidate's sparsity pattern, so one analysis serves the whole sequence.
    n = adj.n
    pattern = adj.matrix.tolil(copy=True)
    if include_global:
        pattern.resize((n + 1, n + 1))
        pattern[n, :n] = 1.0
        pattern[:n, n] = 1.0
    pattern.setdiag(1.0)
    pattern = pattern.tocsc()
    pattern.sort_indices()
    return pattern


@lru_cache(maxsize=32)
def _fill_reducing_order(adj: AdjacencyStructure, include_global: bool) -> np.ndarray:
    pattern = _sparsity_pattern(adj, include_global).tocsr()
    return csgraph.reverse_cuthill_mckee(pattern, symmetric_mode=True)


@lru_cache(maxsize=32)
def _symbolic_analysis(adj: AdjacencyStructure, include_global: bool):
    logger.debug(f"Analysing the sparsity pattern of {adj.n} units (global row: {include_global})")
    return cholmod.analyze(_sparsity_pattern(adj, include_global))


def _on_pattern(matrix: sparse.spmatrix, pattern: sparse.csc_matrix) -> sparse.csc_matrix:
    """`matrix` stored on the superset `pattern`, explicit zeros kept."""
    columns = np.repeat(np.arange(pattern.shape[1]), np.diff(pattern.indptr))
    values = np.asarray(matrix.tocsr()[pattern.indices, columns], dtype=np.float64).ravel()
    return sparse.csc_matrix((values, pattern.indices.copy(), pattern.indptr.copy()), shape=pattern.shape)


class Factor:
    """
    Symmetric factorisation of a positive definite precision matrix.

    With scikit-sparse installed this is a CHOLMOD Cholesky factor that reuses the
    symbolic analysis of the base geography; otherwise SuperLU without pivoting.
    """

    def __init__(self, matrix: sparse.spmatrix, adj: Optional[AdjacencyStructure] = None, include_global: bool = False):
        self.dim = matrix.shape[0]
        if cholmod is not None and adj is not None:
            self._factor_cholmod(matrix, adj, include_global)
        else:
            order = np.arange(self.dim) if adj is None else _fill_reducing_order(adj, include_global)
            self._factor_superlu(matrix, order)
        if not np.isfinite(self.logdet):
            raise NotPositiveDefinite("Precision matrix is not positive definite; the edge state is corrupted")

    def _factor_cholmod(self, matrix, adj, include_global):
        self.backend = "cholmod"
        pattern = _sparsity_pattern(adj, include_global)
        try:
            self._chol = _symbolic_analysis(adj, include_global).cholesky(_on_pattern(matrix, pattern))
        except cholmod.CholmodNotPositiveDefiniteError as e:
            raise NotPositiveDefinite(f"Precision matrix is not positive definite; the edge state is corrupted: {e}")
        self.logdet = float(self._chol.logdet())

    def _factor_superlu(self, matrix, order):
        self.backend = "superlu"
        self.order = order
        permuted = matrix.tocsr()[order][:, order].tocsc()
        try:
            # No pivoting: on an SPD matrix the U pivots are the Cholesky pivots squared.
            self._lu = splu(
                permuted,
                permc_spec="NATURAL",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as e:
            raise NotPositiveDefinite(f"Factorisation failed: {e}")
        pivots = self._lu.U.diagonal()
        if np.any(pivots <= 0) or not np.all(np.isfinite(pivots)):
            raise NotPositiveDefinite(
                "Precision matrix is not positive definite; the edge state is corrupted"
            )
        self.logdet = float(np.sum(np.log(pivots)))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=np.float64)
        if self.backend == "cholmod":
            return np.asarray(self._chol(rhs))
        out = np.empty_like(rhs)
        out[self.order] = self._lu.solve(rhs[self.order])
        return out

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))


def _check_epsilon(epsilon: float) -> None:
    if not epsilon > 0:
        raise NonPositiveEpsilon(f"epsilon must be positive, got {epsilon}")


def build_precision(state: EdgeState, epsilon: float) -> PrecisionMatrix:
    _check_epsilon(epsilon)
    n = state.base.n
    wstar = state.global_links
    links = np.flatnonzero(wstar)
    kept = state.base.edges[state.active]
    rows = np.concatenate([kept[:, 0], kept[:, 1], links, np.full(links.size, n)])
    cols = np.concatenate([kept[:, 1], kept[:, 0], np.full(links.size, n), links])
    diagonal = np.append(state.degree + wstar, links.size) + epsilon
    rows = np.concatenate([rows, np.arange(n + 1)])
    cols = np.concatenate([cols, np.arange(n + 1)])
    data = np.concatenate([-np.ones(rows.size - n - 1), diagonal])
    matrix = sparse.csc_matrix((data, (rows, cols)), shape=(n + 1, n + 1))
    logger.debug(
        f"Precision with {state.n_active} active edges and {links.size} global links"
    )
    return PrecisionMatrix(matrix=matrix, epsilon=float(epsilon), base=state.base)


def build_sub_precision(state: EdgeState, epsilon: float) -> SubPrecision:
    """Q(W, eps)_{1:n} without assembling the global row."""
    _check_epsilon(epsilon)
    diagonal = state.degree + state.global_links + epsilon
    matrix = (sparse.diags(diagonal.astype(np.float64), format="csc") - state.matrix).tocsc()
    return SubPrecision(matrix=matrix, epsilon=float(epsilon), base=state.base)


def factorise(Q: Union[PrecisionMatrix, SubPrecision]) -> Factor:
    include_global = isinstance(Q, PrecisionMatrix)
    return Factor(Q.matrix, Q.base, include_global)


def log_det(Q: Union[PrecisionMatrix, SubPrecision]) -> float:
    return factorise(Q).logdet


def quad_form(Q: Union[PrecisionMatrix, SubPrecision], v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (Q.dim,):
        raise DimensionMismatch(f"Vector of shape {v.shape} against a {Q.dim}-dimensional precision")
    return float(v @ (Q.matrix @ v))


def two_by_two_lemma(d_kk, d_ll, d_kl, s_kk, s_ll, s_kl):
    """
    log det(Q + P D P^T) - log det(Q) for a change D supported on two indices.

    `s_*` are the matching entries of Q^{-1}; all arguments broadcast, so a whole
    set of trial edges is scored at once.
    """
    m00 = 1.0 + d_kk * s_kk + d_kl * s_kl
    m01 = d_kk * s_kl + d_kl * s_ll
    m10 = d_kl * s_kk + d_ll * s_kl
    m11 = 1.0 + d_kl * s_kl + d_ll * s_ll
    det = m00 * m11 - m01 * m10
    if np.any(det <= 0):
        raise NotPositiveDefinite("Edge update leaves the precision indefinite")
    return np.log(det)


def edge_delta_logdet(
    seq: CandidateSequence,
    j: int,
    direction: DIRECTION,
    epsilon: Optional[float] = None,
) -> float:
    """
    Change in ln|Q_{1:n}| when moving from candidate j to j-1 (REMOVE) or j+1 (ADD).

    Only the rows of the two endpoints change in the leading block, so the change
    is a 2x2 determinant computed from two solves against the current factor.
    """
    epsilon = seq.epsilon if epsilon is None else epsilon
    if epsilon is None:
        raise NonPositiveEpsilon("No epsilon given and none recorded on the sequence")
    if not 0 <= j <= seq.n_edges:
        raise IndexOutOfRange(f"Candidate index {j} outside 0..{seq.n_edges}")
    # edge_removed_into raises at the two ends of the sequence
    edge = seq.edge_removed_into(j if direction == DIRECTION.REMOVE else j + 1)

    before = candidate(seq, j)
    after = before.without(edge) if direction == DIRECTION.REMOVE else before.with_edge(edge)
    q_before = build_sub_precision(before, epsilon)
    q_after = build_sub_precision(after, epsilon)

    k, l = seq.base.edges[edge]
    change = (q_after.matrix - q_before.matrix).tocsr()
    factor = factorise(q_before)
    rhs = np.zeros((seq.base.n, 2))
    rhs[k, 0] = 1.0
    rhs[l, 1] = 1.0
    cols = factor.solve(rhs)
    return float(
        two_by_two_lemma(
            change[k, k], change[l, l], change[k, l], cols[k, 0], cols[l, 1], cols[k, 1]
        )
    )


def precompute_logdets(seq: CandidateSequence, epsilon: Optional[float] = None) -> CandidateSequence:
    """Cache ln|Q(W(j), eps)| of the full extended precision for every candidate."""
    epsilon = seq.epsilon if epsilon is None else epsilon
    _check_epsilon(epsilon if epsilon is not None else 0.0)
    logdets = np.empty(seq.n_edges + 1)
    for j in range(seq.n_edges + 1):
        logdets[j] = log_det(build_precision(candidate(seq, j), epsilon))
    logger.info(f"Cached {logdets.size} candidate log-determinants at epsilon={epsilon}")
    return attrs.evolve(seq, epsilon=float(epsilon), precomputed_logdet=logdets)
