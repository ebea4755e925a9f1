import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defog.core import (Stochasticity, Topology, WeightScheme, as_tensor, assemble_weight_matrix,
                        check_tensor, classify_weight_matrix, dense_partial_average_oracle, neighbor_sets)
from defog.errors import ConfigurationError, DimensionError


def random_doubly(n, rng, terms=6):
    # convex combination of permutation matrices
    lam = rng.dirichlet(np.ones(terms))
    return sum(l * np.eye(n)[rng.permutation(n)] for l in lam)


def test_classify_identity_and_uniform():
    assert classify_weight_matrix(np.eye(3)) is Stochasticity.DOUBLY
    assert classify_weight_matrix(np.full((4, 4), 0.25)) is Stochasticity.DOUBLY


def test_classify_row_but_not_column():
    W = np.full((5, 5), 0.2)
    W[0] = [0.6, 0.1, 0.1, 0.1, 0.1]
    assert np.allclose(W.sum(axis=1), 1)
    assert W[:, 0].sum() == pytest.approx(1.4)
    assert classify_weight_matrix(W) is Stochasticity.PULL
    assert classify_weight_matrix(W.T) is Stochasticity.PUSH


def test_classify_rejects_non_square():
    with pytest.raises(DimensionError):
        classify_weight_matrix(np.ones((2, 3)))
    assert classify_weight_matrix(2 * np.eye(2)) is Stochasticity.NONE


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_transpose_swaps_pull_and_push(n, seed):
    rng = np.random.default_rng(seed)
    W = rng.random((n, n))
    W /= W.sum(axis=1, keepdims=True)
    cls = classify_weight_matrix(W)
    assert (classify_weight_matrix(W.T) is Stochasticity.PUSH) == (cls is Stochasticity.PULL)


def fig2_topology():
    # 1-based labels 1..5 mapped to ranks 0..4
    edges = {(0, 4), (1, 4), (2, 4), (3, 4), (4, 0), (4, 2)}
    W = np.eye(5)
    return Topology(5, frozenset(edges), W)


def test_neighbor_sets_fig2_shape():
    ns = neighbor_sets(fig2_topology(), 4)
    assert ns.in_neighbors == {0, 1, 2, 3}
    assert ns.out_neighbors == {0, 2}


def test_neighbor_sets_empty_and_directed_ring():
    empty = Topology(3, frozenset(), np.eye(3))
    for i in range(3):
        assert neighbor_sets(empty, i).in_neighbors == frozenset()
        assert neighbor_sets(empty, i).out_neighbors == frozenset()
    ring = Topology(4, frozenset((i, (i + 1) % 4) for i in range(4)), np.eye(4))
    assert neighbor_sets(ring, 2).in_neighbors == {1}
    assert neighbor_sets(ring, 2).out_neighbors == {3}


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.data())
def test_reversal_swaps_neighbor_sets(n, data):
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    edges = data.draw(st.sets(st.sampled_from(pairs))) if pairs else set()
    topo = Topology(n, frozenset(edges), np.eye(n))
    rev = topo.reversed()
    for i in range(n):
        assert rev.in_neighbors(i) == topo.out_neighbors(i)
        assert rev.out_neighbors(i) == topo.in_neighbors(i)
    assert rev.reversed().edges == topo.edges


def test_topology_rejects_weight_without_edge():
    W = np.eye(3)
    W[0, 1] = 0.5
    with pytest.raises(ConfigurationError, match="edge"):
        Topology(3, frozenset(), W)
    with pytest.raises(ConfigurationError):
        Topology(3, frozenset({(1, 1)}), np.eye(3))
    with pytest.raises(DimensionError):
        Topology(3, frozenset(), np.eye(2))


def test_topology_weights_read_only():
    topo = Topology(2, frozenset({(0, 1), (1, 0)}), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        topo.weights[0, 0] = 1.0


def test_from_weights_round_trip():
    W = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    topo = Topology.from_weights(W)
    assert topo.in_neighbors(0) == {1}
    assert topo.out_neighbors(1) == {0}
    assert topo.local_scheme(0) == WeightScheme(0.5, {1: 0.5})


def test_oracle_identity_and_mean():
    X = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(dense_partial_average_oracle(np.eye(3), X), X)
    out = dense_partial_average_oracle(np.full((3, 3), 1 / 3), np.array([[0.0], [3.0], [6.0]]))
    assert np.allclose(out, 3.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 9), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_doubly_stochastic_preserves_column_sums(n, d, seed):
    rng = np.random.default_rng(seed)
    W = random_doubly(n, rng)
    X = rng.standard_normal((n, d)) * 10
    assert np.allclose(dense_partial_average_oracle(W, X).sum(axis=0), X.sum(axis=0), atol=1e-10)


def test_oracle_shape_errors():
    with pytest.raises(DimensionError):
        dense_partial_average_oracle(np.eye(3), np.ones((2, 1)))


def test_as_tensor_and_check():
    x = as_tensor(3)
    assert x.shape == (1,) and x.dtype == np.float64
    src = np.ones(3)
    assert as_tensor(src) is not src
    with pytest.raises(DimensionError):
        check_tensor(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        check_tensor(np.array([np.nan]))


def test_weight_scheme_configurations():
    assert WeightScheme().configuration == "static"
    assert WeightScheme(0.5, dst_weights={1: 0.5}).configuration == "push"
    assert WeightScheme(0.5, {1: 0.5}).configuration == "pull"
    assert WeightScheme(0.5, {1: 1.0}, {2: 0.5}).configuration == "push_pull"
    with pytest.raises(ConfigurationError):
        WeightScheme(src_weights={1: 1.0})
    with pytest.raises(ConfigurationError):
        WeightScheme(None, {1: 1.0}, {2: 1.0})


def test_weight_scheme_rank_list_means_unit_weights():
    sc = WeightScheme(1.0, [2, 1])
    assert dict(sc.src_weights) == {1: 1.0, 2: 1.0}
    with pytest.raises(ConfigurationError):
        WeightScheme(1.0, [1, 1])


def test_weight_scheme_validate():
    WeightScheme(0.5, {1: 0.5}).validate(3, 0, stochastic=True)
    with pytest.raises(ConfigurationError):
        WeightScheme(0.5, {0: 0.5}).validate(3, 0)
    with pytest.raises(ConfigurationError):
        WeightScheme(0.5, {5: 0.5}).validate(3, 0)
    with pytest.raises(ConfigurationError):
        WeightScheme(1.5, {1: 0.5}).validate(3, 0, stochastic=True)
    WeightScheme(1.5, {1: -0.5}).validate(3, 0)


def test_weight_scheme_views_and_hash():
    sc = WeightScheme(0.5, {1: 0.5}, {2: 0.5})
    assert sc.pull() == WeightScheme(0.5, {1: 0.5})
    assert sc.push() == WeightScheme(0.5, dst_weights={2: 0.5})
    assert len({sc, WeightScheme(0.5, {1: 0.5}, {2: 0.5})}) == 1


def test_assemble_push_only():
    # everyone keeps 1/2 and sends 1/2 to the next rank
    schemes = [WeightScheme(0.5, dst_weights={(i + 1) % 3: 0.5}) for i in range(3)]
    W = assemble_weight_matrix(schemes)
    expected = 0.5 * np.eye(3) + 0.5 * np.roll(np.eye(3), 1, axis=0)
    assert np.allclose(W, expected)
    assert classify_weight_matrix(W) is Stochasticity.DOUBLY


def test_assemble_push_pull_multiplies():
    schemes = [WeightScheme(0.5, {1: 0.5}, {1: 0.5}), WeightScheme(0.5, {0: 0.5}, {0: 0.5})]
    assert np.allclose(assemble_weight_matrix(schemes), [[0.5, 0.25], [0.25, 0.5]])
    with pytest.raises(ConfigurationError):
        assemble_weight_matrix([WeightScheme()])
