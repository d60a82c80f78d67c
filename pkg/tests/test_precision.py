import numpy as np
import pytest
from scipy import sparse

from lcar.common import DIRECTION
from lcar.errors import NonPositiveEpsilon
from lcar.graph import precision
from lcar.graph import (
    CandidateSequence,
    EdgeState,
    SubPrecision,
    build_adjacency,
    build_precision,
    build_sub_precision,
    candidate,
    edge_delta_logdet,
    full_state,
    log_det,
    precompute_logdets,
    quad_form,
)


def dense_sub_precision(state, epsilon):
    n = state.base.n
    W = np.zeros((n, n))
    for a, b in state.base.edges[state.active]:
        W[a, b] = W[b, a] = 1.0
    wstar = state.global_links.astype(float)
    return np.diag(W.sum(axis=1) + wstar + epsilon) - W


def dense_logdet(matrix):
    return float(np.sum(np.log(np.linalg.eigvalsh(matrix))))


def random_state(rng, adj):
    return EdgeState(base=adj, active=rng.uniform(size=adj.n_edges) < 0.5)


def test_path_precision_full(path3):
    Q = build_precision(full_state(path3), 0.001).matrix.toarray()
    np.testing.assert_allclose(np.diag(Q), [1.001, 2.001, 1.001, 0.001])
    assert Q[0, 1] == Q[1, 0] == -1.0
    assert Q[1, 2] == Q[2, 1] == -1.0
    assert Q[0, 2] == 0.0
    np.testing.assert_array_equal(Q[3, :3], 0.0)


def test_path_precision_after_removal(path3):
    state = full_state(path3).without(0)
    Q = build_precision(state, 0.001).matrix.toarray()
    np.testing.assert_allclose(np.diag(Q), [1.001, 2.001, 1.001, 2.001])
    np.testing.assert_array_equal(Q[3, :3], [-1.0, -1.0, 0.0])
    assert Q[0, 1] == 0.0
    np.testing.assert_allclose(Q, Q.T)


def test_single_island_unit():
    adj = build_adjacency([], 1)
    Q = build_precision(full_state(adj), 0.5).matrix.toarray()
    np.testing.assert_allclose(Q, np.diag([0.5, 0.5]))
    assert np.all(np.linalg.eigvalsh(Q) > 0)


def test_nonpositive_epsilon(path3):
    with pytest.raises(NonPositiveEpsilon):
        build_precision(full_state(path3), 0.0)
    with pytest.raises(NonPositiveEpsilon):
        build_sub_precision(full_state(path3), -1.0)


def test_log_det_diagonal():
    adj = build_adjacency([], 2)
    sub = SubPrecision(matrix=sparse.csc_matrix(np.diag([2.0, 2.0])), epsilon=1.0, base=adj)
    assert log_det(sub) == pytest.approx(np.log(4.0), abs=1e-12)


def test_log_det_path(path3):
    sub = build_sub_precision(full_state(path3), 0.001)
    assert log_det(sub) == pytest.approx(dense_logdet(sub.matrix.toarray()), abs=1e-10)


def test_log_det_random_states(random_graph):
    rng = np.random.default_rng(11)
    for _ in range(200):
        adj = random_graph(rng, int(rng.integers(2, 13)))
        state = random_state(rng, adj)
        epsilon = float(rng.choice([1e-4, 1e-3, 1e-2]))
        sub = build_sub_precision(state, epsilon)
        np.testing.assert_allclose(sub.matrix.toarray(), dense_sub_precision(state, epsilon))
        assert log_det(sub) == pytest.approx(dense_logdet(sub.matrix.toarray()), abs=1e-8)
        full = build_precision(state, epsilon)
        assert log_det(full) == pytest.approx(dense_logdet(full.matrix.toarray()), abs=1e-8)


def test_leading_block_matches_sub_precision(random_graph):
    rng = np.random.default_rng(5)
    adj = random_graph(rng, 7)
    state = random_state(rng, adj)
    block = build_precision(state, 0.01).leading_block().matrix.toarray()
    np.testing.assert_allclose(block, build_sub_precision(state, 0.01).matrix.toarray())


def test_quad_form(path3):
    sub = build_sub_precision(full_state(path3), 0.001)
    assert quad_form(sub, np.zeros(3)) == 0.0
    v = np.random.default_rng(2).standard_normal(3)
    assert quad_form(sub, v) == pytest.approx(v @ sub.matrix.toarray() @ v, abs=1e-12)


def test_quad_form_diagonal():
    adj = build_adjacency([], 3)
    d = np.array([1.0, 2.0, 3.0])
    sub = SubPrecision(matrix=sparse.csc_matrix(np.diag(d)), epsilon=1.0, base=adj)
    v = np.array([0.5, -1.0, 2.0])
    assert quad_form(sub, v) == pytest.approx(np.sum(d * v**2))


def test_delta_logdet_path_removal(path3):
    seq = CandidateSequence(base=path3, removal_order=np.array([0, 1]), epsilon=0.001)
    # candidate 2 -> 1 drops edge {1,2}
    before = dense_sub_precision(candidate(seq, 2), 0.001)
    after = dense_sub_precision(candidate(seq, 1), 0.001)
    expected = dense_logdet(after) - dense_logdet(before)
    assert edge_delta_logdet(seq, 2, DIRECTION.REMOVE) == pytest.approx(expected, abs=1e-8)


def test_delta_logdet_telescopes(random_graph):
    rng = np.random.default_rng(8)
    for _ in range(20):
        adj = random_graph(rng, int(rng.integers(3, 13)))
        seq = CandidateSequence(base=adj, removal_order=rng.permutation(adj.n_edges), epsilon=0.001)
        logdets = [log_det(build_sub_precision(candidate(seq, j), 0.001)) for j in range(adj.n_edges + 1)]
        removals = [edge_delta_logdet(seq, j, DIRECTION.REMOVE) for j in range(1, adj.n_edges + 1)]
        np.testing.assert_allclose(removals, -np.diff(logdets), atol=1e-8)
        assert sum(removals) == pytest.approx(logdets[0] - logdets[-1], abs=1e-8)


def test_remove_then_add_is_involution(random_graph):
    rng = np.random.default_rng(9)
    adj = random_graph(rng, 6, density=0.7)
    seq = CandidateSequence(base=adj, removal_order=rng.permutation(adj.n_edges), epsilon=0.01)
    for j in range(1, adj.n_edges + 1):
        there = edge_delta_logdet(seq, j, DIRECTION.REMOVE)
        back = edge_delta_logdet(seq, j - 1, DIRECTION.ADD)
        assert there + back == pytest.approx(0.0, abs=1e-10)


def test_precompute_logdets(random_graph):
    rng = np.random.default_rng(4)
    adj = random_graph(rng, 6)
    seq = precompute_logdets(CandidateSequence(base=adj, removal_order=rng.permutation(adj.n_edges)), 0.001)
    assert seq.epsilon == 0.001
    for j in range(adj.n_edges + 1):
        full = build_precision(candidate(seq, j), 0.001).matrix.toarray()
        assert seq.precomputed_logdet[j] == pytest.approx(dense_logdet(full), abs=1e-8)


def test_precision_spectrum_is_shifted_laplacian(random_graph):
    rng = np.random.default_rng(12)
    for _ in range(10):
        adj = random_graph(rng, int(rng.integers(3, 10)))
        state = random_state(rng, adj)
        epsilon = float(rng.uniform(1e-3, 1.0))
        Q = build_precision(state, epsilon).matrix.toarray()
        laplacian = Q - epsilon * np.eye(adj.n + 1)
        np.testing.assert_allclose(laplacian @ np.ones(adj.n + 1), 0.0, atol=1e-12)
        assert np.linalg.eigvalsh(Q).min() == pytest.approx(epsilon, abs=1e-9)


def test_full_geography_laplacian_annihilates_constants(random_graph):
    adj = random_graph(np.random.default_rng(13), 8)
    sub = build_sub_precision(full_state(adj), 0.01).matrix.toarray() - 0.01 * np.eye(8)
    np.testing.assert_allclose(sub @ np.ones(8), 0.0, atol=1e-12)


def test_cholmod_reuses_one_analysis_per_geography(random_graph):
    pytest.importorskip("sksparse.cholmod")
    rng = np.random.default_rng(14)
    adj = random_graph(rng, 9, density=0.6)
    seq = CandidateSequence(base=adj, removal_order=rng.permutation(adj.n_edges), epsilon=0.001)
    precision._symbolic_analysis.cache_clear()
    for j in range(adj.n_edges + 1):
        full = build_precision(candidate(seq, j), 0.001)
        factor = precision.factorise(full)
        assert factor.backend == "cholmod"
        assert factor.logdet == pytest.approx(dense_logdet(full.matrix.toarray()), abs=1e-8)
    info = precision._symbolic_analysis.cache_info()
    assert info.misses == 1
    assert info.hits == adj.n_edges


def test_superlu_backend_agrees(random_graph, monkeypatch):
    monkeypatch.setattr(precision, "cholmod", None)
    rng = np.random.default_rng(15)
    adj = random_graph(rng, 7)
    sub = build_sub_precision(random_state(rng, adj), 0.01)
    factor = precision.factorise(sub)
    assert factor.backend == "superlu"
    assert factor.logdet == pytest.approx(dense_logdet(sub.matrix.toarray()), abs=1e-8)
    rhs = rng.standard_normal((7, 2))
    np.testing.assert_allclose(sub.matrix.toarray() @ factor.solve(rhs), rhs, atol=1e-8)
