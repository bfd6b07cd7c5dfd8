import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peerfx.network import (NetworkError, build_design, build_network, compute_pi,
                            identification_diagnostic, numerical_rank)


def dense(m):
    return m.toarray()


# --- build_network ---------------------------------------------------------

def test_chain_weights(chain):
    W = dense(chain.weights[0][0])
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 2] = 1.0
    np.testing.assert_array_equal(W, expected)
    np.testing.assert_array_equal(dense(chain.weights_all), expected)


def test_empty_edges_give_zero_weights():
    net = build_network(np.empty((0, 2), int), [0, 1, 0], M=2)
    for g, h in itertools.product(range(2), repeat=2):
        assert net.weights[g][h].nnz == 0
    assert net.weights_all.nnz == 0


def test_each_group_pair_normalized_separately():
    # agent 0 (group 0) links to 1 (group 0) and 2 (group 1)
    net = build_network([(0, 1), (0, 2)], [0, 0, 1], M=2)
    assert dense(net.weights[0][0])[0, 1] == 1.0
    assert dense(net.weights[0][1])[0, 2] == 1.0
    np.testing.assert_allclose(dense(net.weights_all)[0], [0, 0.5, 0.5])


def test_rejects_self_link():
    with pytest.raises(NetworkError, match="self-link"):
        build_network([(0, 0)], [0, 0])


def test_rejects_cross_subnetwork_edge_and_names_pair():
    with pytest.raises(NetworkError, match=r"\(1, 2\)"):
        build_network([(0, 1), (1, 2)], [0, 0, 0], subnet=[0, 0, 1])


def test_rejects_duplicates_and_out_of_range():
    with pytest.raises(NetworkError, match="duplicate"):
        build_network([(0, 1), (0, 1)], [0, 0])
    with pytest.raises(NetworkError, match="outside"):
        build_network([(0, 5)], [0, 0])


def test_peer_matrix_combines_blocks():
    net = build_network([(0, 1), (0, 2), (2, 0)], [0, 0, 1], M=2)
    alpha = np.array([[0.3, 0.1], [0.2, 0.4]])
    G = dense(net.peer_matrix(alpha))
    assert G[0, 1] == pytest.approx(0.3)
    assert G[0, 2] == pytest.approx(0.1)
    assert G[2, 0] == pytest.approx(0.2)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_row_sums_and_degree_decomposition(n, M, seed):
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, M, size=n)
    edges = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.4]
    net = build_network(np.array(edges, int).reshape(-1, 2), groups, M=M)
    counted = np.zeros(n)
    for g in range(M):
        for h in range(M):
            rs = np.asarray(net.weights[g][h].sum(axis=1)).ravel()
            assert np.all((np.abs(rs) < 1e-12) | (np.abs(rs - 1) < 1e-12))
            A = dense(net.adj[g][h])
            # links leave group g and land in group h only
            assert A[groups != g].sum() == 0 and A[:, groups != h].sum() == 0
            counted += A.sum(axis=1)
    np.testing.assert_array_equal(counted, net.out_degree)


# --- build_design ----------------------------------------------------------

def test_chain_contextual_averages(chain):
    d = build_design(chain, np.array([0.0, 1.0, 5.0]))
    np.testing.assert_allclose(d.WX[:, 0], [1.0, 5.0, 0.0])
    np.testing.assert_allclose(d.Z, np.column_stack([np.ones(3), [0, 1, 5], [1, 5, 0]]))


def test_constant_column_preserved_for_agents_with_friends(chain):
    X = np.column_stack([np.full(3, 4.2), [1.0, 2.0, 3.0]])
    d = build_design(chain, X)
    np.testing.assert_allclose(d.WX[:2, 0], 4.2)
    assert d.WX[2, 0] == 0.0


def test_fixed_effects_replace_intercept():
    net = build_network([(0, 1), (2, 3)], [0] * 4, subnet=[0, 0, 1, 1])
    d = build_design(net, np.arange(4.0), fixed_effects=True)
    assert d.n_intercepts == 2
    np.testing.assert_array_equal(d.Z[:, :2], [[1, 0], [1, 0], [0, 1], [0, 1]])
    assert d.own_column(0) == 2 and d.contextual_column(0) == 3


def test_design_rejects_non_finite(chain):
    with pytest.raises(ValueError, match="non-finite covariate for agent 1"):
        build_design(chain, np.array([0.0, np.nan, 1.0]))


def test_contextual_average_in_convex_hull(rng):
    for _ in range(20):
        n = 7
        edges = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.4]
        net = build_network(np.array(edges, int).reshape(-1, 2), np.zeros(n, int))
        X = rng.normal(size=(n, 2))
        d = build_design(net, X)
        A = dense(net.adj_all)
        for i in range(n):
            fr = np.flatnonzero(A[i])
            if fr.size:
                assert np.all(d.WX[i] <= X[fr].max(axis=0) + 1e-12)
                assert np.all(d.WX[i] >= X[fr].min(axis=0) - 1e-12)
            else:
                assert np.all(d.WX[i] == 0)


# --- compute_pi ------------------------------------------------------------

def brute_force_pi(n, edges, groups, M):
    friends = {i: {j for (a, j) in edges if a == i} for i in range(n)}
    out = np.zeros((n, M), dtype=int)
    for i in range(n):
        fof = set()
        for j in friends[i]:
            fof |= friends[j]
        fof -= friends[i]
        fof.discard(i)
        for g in range(M):
            has_g = any(groups[j] == g for j in friends[i])
            out[i, g] = int(has_g and bool(fof))
    return out


def test_chain_pi(chain):
    np.testing.assert_array_equal(compute_pi(chain)[:, 0], [1, 0, 0])


def test_complete_triangle_pi_zero():
    edges = [(i, j) for i in range(3) for j in range(3) if i != j]
    net = build_network(edges, [0, 0, 0])
    assert compute_pi(net).sum() == 0


def test_chain_with_two_groups_pi():
    net = build_network([(0, 1), (1, 2)], [0, 1, 0], M=2)
    np.testing.assert_array_equal(compute_pi(net)[0], [0, 1])


def test_pi_matches_brute_force_on_random_graphs():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        n = int(rng.integers(1, 7))
        M = int(rng.integers(1, 3))
        p = rng.uniform(0.1, 0.7)
        edges = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < p]
        groups = rng.integers(0, M, size=n)
        net = build_network(np.array(edges, int).reshape(-1, 2), groups, M=M)
        np.testing.assert_array_equal(compute_pi(net), brute_force_pi(n, edges, groups, M))


def test_pi_monotone_when_closing_triangles():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(3000):
        n = int(rng.integers(3, 7))
        M = int(rng.integers(1, 3))
        edges = {(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.35}
        groups = rng.integers(0, M, size=n)
        before = brute_force_pi(n, edges, groups, M)
        friends = {i: {j for (a, j) in edges if a == i} for i in range(n)}
        for i in range(n):
            fof = set().union(*[friends[j] for j in friends[i]]) - friends[i] - {i}
            for j in fof:
                after = build_network(np.array(sorted(edges | {(i, j)}), int), groups, M=M)
                pi_after = compute_pi(after)
                for g in range(M):
                    if any(groups[k] == g for k in friends[i]):
                        assert pi_after[i, g] <= before[i, g]
                        checked += 1
    assert checked > 1000


# --- identification diagnostics --------------------------------------------

def _copies(edges, size, copies, groups=None):
    all_edges, grp, sub = [], [], []
    for c in range(copies):
        all_edges += [(i + c * size, j + c * size) for i, j in edges]
        grp += list(groups) if groups is not None else [0] * size
        sub += [c] * size
    return np.array(all_edges), np.array(grp), np.array(sub)


def test_chain_copies_pass_condition_b():
    rng = np.random.default_rng(0)
    edges, grp, sub = _copies([(0, 1), (1, 2)], 3, 30)
    net = build_network(edges, grp, sub)
    rep = identification_diagnostic(net, build_design(net, rng.normal(size=(90, 1))))
    assert rep.condition_b == "PASS"
    assert rep.verdict == "PASS"


def test_complete_triangles_fail_condition_b():
    rng = np.random.default_rng(0)
    tri = [(i, j) for i in range(3) for j in range(3) if i != j]
    edges, grp, sub = _copies(tri, 3, 20)
    net = build_network(edges, grp, sub)
    rep = identification_diagnostic(net, build_design(net, rng.normal(size=(60, 1))))
    assert rep.condition_b == "FAIL" and rep.rank_pi == 0
    assert rep.verdict == "FAIL"


def test_all_mixed_friendships_fail_with_rank_one():
    # every agent has friends in both groups and a friend's friend outside its friends
    rng = np.random.default_rng(0)
    edges = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 0), (3, 0), (3, 1)]
    grp = [0, 1, 0, 1]
    E, G, Sb = _copies(edges, 4, 15, grp)
    net = build_network(E, G, Sb, M=2)
    pi = compute_pi(net)
    assert np.all(pi == 1)
    rep = identification_diagnostic(net, build_design(net, rng.normal(size=(60, 1))))
    assert rep.rank_pi == 1 and rep.condition_b == "FAIL" and rep.verdict == "FAIL"


def test_many_groups_is_indeterminate():
    rng = np.random.default_rng(0)
    net = build_network([(0, 1), (1, 2), (2, 3)], [0, 1, 2, 0], M=3)
    with pytest.warns(UserWarning, match="M <= 2"):
        rep = identification_diagnostic(net, build_design(net, rng.normal(size=(4, 1))))
    assert rep.verdict in ("INDETERMINATE", "FAIL") and rep.condition_b == "NOT_EVALUATED"


def test_contextual_condition_is_post_estimation(chain):
    d = build_design(chain, np.array([0.0, 1.0, 5.0]))
    rep = identification_diagnostic(chain, d, contextual_index=0)
    assert rep.condition_c == "POST_ESTIMATION"
    assert rep.to_dict()["condition_C"]["contextual_index"] == 0


def test_numerical_rank():
    assert numerical_rank(np.eye(3))[0] == 3
    assert numerical_rank(np.ones((3, 3)))[0] == 1
    assert numerical_rank(np.zeros((2, 2)))[0] == 0
