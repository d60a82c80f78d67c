import hashlib
import logging
from functools import cached_property
from typing import Iterable, Optional, Tuple

import attrs
import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from lcar.errors import IndexOutOfRange, SelfLoop, ValidationError

logger = logging.getLogger(__name__)


@attrs.frozen(eq=False, slots=False)
class AdjacencyStructure:
    """
    The fixed geography: `n` areal units and their undirected border relation.

    Edges are stored 0-based as an (N_W, 2) array with `edges[:, 0] < edges[:, 1]`,
    sorted lexicographically. That order is the canonical edge index used by every
    edge state and candidate sequence. Public readers and writers use 1-based units.
    """

    n: int
    edges: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """Binary symmetric n x n neighbourhood matrix W."""
        return _symmetric_matrix(self.n, self.edges, np.ones(self.n_edges, dtype=bool))

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    @cached_property
    def islands(self) -> np.ndarray:
        """Units with no neighbour in the base geography."""
        return self.degree == 0

    @cached_property
    def components(self) -> Tuple[int, np.ndarray]:
        return csgraph.connected_components(self.matrix, directed=False)

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """n x N_W unit-edge incidence matrix."""
        rows = self.edges.ravel()
        cols = np.repeat(np.arange(self.n_edges), 2)
        data = np.ones(rows.size, dtype=np.int64)
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n, self.n_edges))

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        return h.hexdigest()

    def edge_pairs(self) -> list[Tuple[int, int]]:
        """Canonical edges as 1-based (from, to) pairs."""
        return [(int(a) + 1, int(b) + 1) for a, b in self.edges]

    def edge_index(self, k: int, j: int) -> int:
        """Canonical index of the 1-based edge {k, j}."""
        lo, hi = sorted((k - 1, j - 1))
        hits = np.flatnonzero((self.edges[:, 0] == lo) & (self.edges[:, 1] == hi))
        if hits.size == 0:
            raise IndexOutOfRange(f"Edge {{{k},{j}}} is not in the adjacency structure")
        return int(hits[0])


@attrs.frozen(eq=False, slots=False)
class EdgeState:
    """Which base edges are active in the current extended neighbourhood matrix."""

    base: AdjacencyStructure
    active: np.ndarray

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))

    @cached_property
    def global_links(self) -> np.ndarray:
        """w_k*: unit k has lost at least one of its base edges."""
        wstar = np.zeros(self.base.n, dtype=bool)
        wstar[self.base.edges[~self.active].ravel()] = True
        return wstar

    @cached_property
    def degree(self) -> np.ndarray:
        """Number of active edges at each unit."""
        return np.bincount(self.base.edges[self.active].ravel(), minlength=self.base.n)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """Active part of W as an n x n sparse matrix."""
        return _symmetric_matrix(self.base.n, self.base.edges, self.active)

    def without(self, edge: int) -> "EdgeState":
        active = self.active.copy()
        active[edge] = False
        return EdgeState(base=self.base, active=active)

    def with_edge(self, edge: int) -> "EdgeState":
        active = self.active.copy()
        active[edge] = True
        return EdgeState(base=self.base, active=active)


@attrs.frozen(eq=False, slots=False)
class CandidateSequence:
    """
    Ordered candidate neighbourhood matrices W(0), ..., W(N_W).

    Candidate j keeps the last j entries of `removal_order` active, so W(N_W) is the
    full geography, W(0) has no edges and `removal_order[0]` is the first edge the
    elicitation removed.
    """

    base: AdjacencyStructure
    removal_order: np.ndarray
    epsilon: Optional[float] = None
    precomputed_logdet: Optional[np.ndarray] = None

    def __attrs_post_init__(self):
        order = np.asarray(self.removal_order)
        if order.shape != (self.base.n_edges,) or not np.array_equal(
            np.sort(order), np.arange(self.base.n_edges)
        ):
            raise ValidationError("removal_order must be a permutation of the edge indices")

    @property
    def n_edges(self) -> int:
        return self.base.n_edges

    @cached_property
    def position(self) -> np.ndarray:
        """Step (0-based) at which each canonical edge is removed."""
        position = np.empty(self.n_edges, dtype=np.int64)
        position[self.removal_order] = np.arange(self.n_edges)
        return position

    def candidate(self, j: int) -> EdgeState:
        return candidate(self, j)

    def edge_removed_into(self, j: int) -> int:
        """The edge that W(j) has and W(j-1) lacks."""
        if not 1 <= j <= self.n_edges:
            raise IndexOutOfRange(f"No edge separates candidates {j} and {j - 1}")
        return int(self.removal_order[self.n_edges - j])


def _symmetric_matrix(n: int, edges: np.ndarray, active: np.ndarray) -> sparse.csr_matrix:
    kept = edges[active]
    rows = np.concatenate([kept[:, 0], kept[:, 1]])
    cols = np.concatenate([kept[:, 1], kept[:, 0]])
    data = np.ones(rows.size, dtype=np.float64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def build_adjacency(edge_list: Iterable[Tuple[int, int]], n: int) -> AdjacencyStructure:
    """Validate 1-based unit pairs and return the deduplicated canonical structure."""
    if n < 1:
        raise IndexOutOfRange(f"Number of units must be positive, got {n}")
    pairs = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        bad = (pairs < 1) | (pairs > n)
        if bad.any():
            row = int(np.flatnonzero(bad.any(axis=1))[0])
            raise IndexOutOfRange(
                f"Edge {tuple(pairs[row])} references a unit outside 1..{n}"
            )
        loops = pairs[:, 0] == pairs[:, 1]
        if loops.any():
            raise SelfLoop(f"Unit {int(pairs[loops][0, 0])} is listed as its own neighbour")
    canonical = np.sort(pairs - 1, axis=1)
    canonical = np.unique(canonical, axis=0) if canonical.size else canonical
    logger.debug(f"Adjacency with {n} units and {canonical.shape[0]} edges")
    return AdjacencyStructure(n=int(n), edges=canonical.reshape(-1, 2))


def full_state(adj: AdjacencyStructure) -> EdgeState:
    return EdgeState(base=adj, active=np.ones(adj.n_edges, dtype=bool))


def extended_row_sums(state: EdgeState) -> np.ndarray:
    """Row sums of the extended (n+1) x (n+1) neighbourhood matrix."""
    wstar = state.global_links.astype(np.int64)
    return np.append(state.degree + wstar, wstar.sum())


def candidate(seq: CandidateSequence, j: int) -> EdgeState:
    if not 0 <= j <= seq.n_edges:
        raise IndexOutOfRange(f"Candidate index {j} outside 0..{seq.n_edges}")
    active = np.zeros(seq.n_edges, dtype=bool)
    active[seq.removal_order[seq.n_edges - j :]] = True
    return EdgeState(base=seq.base, active=active)
