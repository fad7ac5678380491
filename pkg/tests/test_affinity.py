# tests/test_affinity.py
import numpy as np
import pytest

from correspondence_transfer.affinity import (
    build_affinity_matrix, edge_affinity, node_affinity, stripe_search_space,
)
from correspondence_transfer.errors import IndexRangeError, LayoutMismatchError, StripeError
from correspondence_transfer.imggraph import build_graph, decompose_into_patches
from correspondence_transfer.models import MatchProblem

from .conftest import random_graph


def _problem(probe_nodes, gallery_nodes):
    return MatchProblem(probe_nodes=probe_nodes, gallery_nodes=gallery_nodes)


def test_node_affinity_of_identical_nodes_is_one():
    assert node_affinity([0.2, 0.3], [0.2, 0.3], [1, 0], [1, 0], 0.2, 1.0) == 1.0


def test_node_affinity_decays_with_distance():
    near = node_affinity([0.0, 0.0], [0.0, 0.1], [1, 0], [1, 0], 0.2, 1.0)
    far = node_affinity([0.0, 0.0], [0.0, 0.3], [1, 0], [1, 0], 0.2, 1.0)
    assert near == pytest.approx(np.exp(-0.5))
    assert far < near


def test_edge_affinity_is_one_for_a_rigid_translation():
    value = edge_affinity([0.1, 0.1], [0.3, 0.2], [0.2, 0.4], [0.4, 0.5],
                          [1, 0], [0, 1], [1, 0], [0, 1], 0.2, 1.0)
    assert value == pytest.approx(1.0)


def test_affinity_matrix_structure(layout):
    rng = np.random.default_rng(1)
    probe, gallery = random_graph(layout, rng), random_graph(layout, rng)
    problem = _problem([0, 1, 2, 3], [0, 1, 2, 3, 4])
    K = build_affinity_matrix(probe, gallery, problem, 0.2, 1.0)
    A = K.entries
    n1, n2 = 4, 5

    assert A.shape == (20, 20)
    np.testing.assert_array_equal(A, A.T)
    assert np.all(A >= 0)

    for a in range(n1 * n2):
        i1, i2 = divmod(a, n2)
        assert A[a, a] == pytest.approx(node_affinity(
            probe.positions_norm[i1], gallery.positions_norm[i2],
            probe.features[i1], gallery.features[i2], 0.2, 1.0), abs=1e-12)
        for b in range(n1 * n2):
            j1, j2 = divmod(b, n2)
            if a != b and (i1 == j1 or i2 == j2):
                assert A[a, b] == 0.0


def test_affinity_entry_matches_edge_formula(layout):
    rng = np.random.default_rng(2)
    probe, gallery = random_graph(layout, rng), random_graph(layout, rng)
    p_nodes, g_nodes = [3, 4, 5], [0, 3, 4, 5, 6]
    K = build_affinity_matrix(probe, gallery, _problem(p_nodes, g_nodes), 0.2, 1.0)

    i1, i2, j1, j2 = 0, 1, 2, 4
    P1, F1 = probe.positions_norm[p_nodes], probe.features[p_nodes]
    P2, F2 = gallery.positions_norm[g_nodes], gallery.features[g_nodes]
    expected = edge_affinity(P1[i1], P1[j1], P2[i2], P2[j2], F1[i1], F1[j1], F2[i2], F2[j2], 0.2, 1.0)
    assert K.entries[i1 * 5 + i2, j1 * 5 + j2] == pytest.approx(expected, abs=1e-12)


def test_out_of_range_nodes_rejected(layout):
    rng = np.random.default_rng(3)
    probe, gallery = random_graph(layout, rng), random_graph(layout, rng)
    with pytest.raises(IndexRangeError):
        build_affinity_matrix(probe, gallery, _problem([0, 99], [0, 1, 2]), 0.2, 1.0)


def test_stripe_search_space_expands_gallery_rows(layout):
    problem = stripe_search_space(layout, layout, 0, 1)
    assert problem.probe_nodes.tolist() == list(range(9))
    assert problem.gallery_nodes.tolist() == list(range(12))

    middle = stripe_search_space(layout, layout, 1, 1)
    assert middle.probe_nodes.tolist() == list(range(9, 15))
    assert middle.gallery_nodes.tolist() == list(range(6, 18))


def test_stripe_search_space_clamps_at_bottom(layout):
    problem = stripe_search_space(layout, layout, 3, 2)
    assert problem.probe_nodes.tolist() == list(range(21, 27))
    assert problem.gallery_nodes.tolist() == list(range(15, 27))


def test_stripe_index_out_of_range(layout):
    with pytest.raises(StripeError):
        stripe_search_space(layout, layout, 4, 1)


def test_stripe_count_mismatch(layout):
    other = decompose_into_patches(48, 128, 32, 32, 8, 12, 3)
    with pytest.raises(LayoutMismatchError):
        stripe_search_space(layout, other, 0, 1)


def test_structure_over_many_random_instances():
    layout = decompose_into_patches(72, 32, 32, 32, 8, 12, 1)
    rng = np.random.default_rng(11)
    for _ in range(1000):
        dim = int(rng.integers(2, 12))
        probe, gallery = random_graph(layout, rng, dim), random_graph(layout, rng, dim)
        n2 = int(rng.integers(1, 7))
        n1 = int(rng.integers(1, n2 + 1))
        problem = _problem(rng.choice(6, n1, replace=False), rng.choice(6, n2, replace=False))
        A = build_affinity_matrix(probe, gallery, problem, 0.2, 1.0).entries

        np.testing.assert_array_equal(A, A.T)
        rows, cols = np.divmod(np.arange(n1 * n2), n2)
        conflict = (rows[:, None] == rows[None, :]) | (cols[:, None] == cols[None, :])
        np.fill_diagonal(conflict, False)
        assert np.all(A[conflict] == 0.0)
        assert np.all(A[~conflict] > 0.0) and np.all(A <= 1.0)


def test_rescaled_images_give_the_same_matrix():
    rng = np.random.default_rng(12)
    small = decompose_into_patches(48, 128, 32, 32, 8, 12, 4)
    large = decompose_into_patches(96, 256, 64, 64, 16, 24, 4)
    features = [rng.random((27, 24)) for _ in range(2)]
    problem = stripe_search_space(small, small, 1, 1)

    K_small = build_affinity_matrix(build_graph(small, features[0]), build_graph(small, features[1]),
                                    problem, 0.2, 1.0)
    K_large = build_affinity_matrix(build_graph(large, features[0]), build_graph(large, features[1]),
                                    problem, 0.2, 1.0)
    np.testing.assert_array_equal(K_small.entries, K_large.entries)


def test_long_feature_vectors_match_the_edge_formula():
    layout = decompose_into_patches(56, 32, 32, 32, 8, 12, 1)
    rng = np.random.default_rng(13)
    probe, gallery = random_graph(layout, rng, dim=500), random_graph(layout, rng, dim=500)
    problem = _problem([0, 1, 2], [0, 1, 2, 3])
    A = build_affinity_matrix(probe, gallery, problem, 0.2, 1.0).entries

    P1, F1 = probe.positions_norm, probe.features
    P2, F2 = gallery.positions_norm, gallery.features
    for a in range(12):
        i1, i2 = divmod(a, 4)
        for b in range(12):
            j1, j2 = divmod(b, 4)
            if a == b or i1 == j1 or i2 == j2:
                continue
            expected = edge_affinity(P1[i1], P1[j1], P2[i2], P2[j2], F1[i1], F1[j1], F2[i2], F2[j2], 0.2, 1.0)
            assert A[a, b] == pytest.approx(expected, abs=1e-9)
