"""Tests for view-graph selection against brute-force enumeration."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connrsfm.errors import DisconnectedGraphError, DomainError
from connrsfm.viewgraph import (
    MatchGraph,
    SelectedSubgraph,
    edge_weights_normalized,
    greedy_k_esp,
    max_spanning_tree,
    select_subgraph,
    tree_connectivity,
)


def graph_from_dict(n, wdict):
    w = np.zeros((n, n))
    for (i, j), val in wdict.items():
        w[i, j] = w[j, i] = val
    return MatchGraph(w)


def all_spanning_trees(n, edges):
    """Brute-force all spanning trees of an edge list."""
    for combo in itertools.combinations(edges, n - 1):
        sub = SelectedSubgraph(n_frames=n, edges=tuple(combo))
        if tree_connectivity(sub) > float("-inf"):
            yield combo


def count_spanning_trees(n, edges):
    return sum(1 for _ in all_spanning_trees(n, edges))


class TestTreeConnectivity:
    def test_single_edge(self):
        g = SelectedSubgraph(n_frames=2, edges=((0, 1, 1.0),))
        assert tree_connectivity(g) == pytest.approx(0.0, abs=1e-12)

    def test_unit_weight_tree_is_zero(self):
        g = SelectedSubgraph(
            n_frames=5, edges=((0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (2, 4, 1.0))
        )
        assert tree_connectivity(g) == pytest.approx(0.0, abs=1e-12)

    def test_unit_triangle(self):
        # matrix-tree theorem: a triangle has 3 spanning trees
        g = SelectedSubgraph(n_frames=3, edges=((0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)))
        assert tree_connectivity(g) == pytest.approx(math.log(3), abs=1e-12)

    def test_disconnected_sentinel(self):
        g = SelectedSubgraph(n_frames=4, edges=((0, 1, 1.0), (2, 3, 1.0)))
        assert tree_connectivity(g) == float("-inf")

    @given(
        n=st.integers(min_value=2, max_value=6),
        seed=st.integers(min_value=0, max_value=1000),
    )
    @settings(max_examples=40, deadline=None)
    def test_matrix_tree_theorem_unit_weights(self, n, seed):
        # oracle: log of the exhaustive spanning-tree count
        rng = np.random.default_rng(seed)
        full = [(i, j) for i in range(n) for j in range(i + 1, n)]
        keep = [e for e in full if rng.random() < 0.7]
        edges = tuple((i, j, 1.0) for i, j in keep)
        sub = SelectedSubgraph(n_frames=n, edges=edges)
        count = count_spanning_trees(n, edges)
        if count == 0:
            assert tree_connectivity(sub) == float("-inf")
        else:
            assert tree_connectivity(sub) == pytest.approx(
                math.log(count), abs=1e-9
            )


class TestMaxSpanningTree:
    def test_path_forced(self):
        g = graph_from_dict(3, {(0, 1): 5, (1, 2): 3})
        tree = max_spanning_tree(g)
        assert set((i, j) for i, j, _ in tree.edges) == {(0, 1), (1, 2)}

    def test_triangle(self):
        # oracle: enumerate all three trees, weights (5, 4, 1)
        g = graph_from_dict(3, {(0, 1): 5, (0, 2): 4, (1, 2): 1})
        tree = max_spanning_tree(g)
        weights = sorted(w for _, _, w in tree.edges)
        assert weights == [4, 5]

    def test_k4_matches_bruteforce(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            vals = rng.permutation(np.arange(1, 7)).astype(float)
            wdict = dict(zip([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], vals))
            g = graph_from_dict(4, wdict)
            tree = max_spanning_tree(g)
            total = sum(w for _, _, w in tree.edges)
            best = max(
                sum(w for _, _, w in combo)
                for combo in all_spanning_trees(4, g.edges())
            )
            assert total == pytest.approx(best)

    def test_disconnected_reports_components(self):
        g = graph_from_dict(4, {(0, 1): 2, (2, 3): 1})
        with pytest.raises(DisconnectedGraphError) as err:
            max_spanning_tree(g)
        assert sorted(map(tuple, err.value.components)) == [(0, 1), (2, 3)]

    def test_deterministic_tie_breaking(self):
        g = graph_from_dict(3, {(0, 1): 2, (0, 2): 2, (1, 2): 2})
        tree = max_spanning_tree(g)
        assert tuple((i, j) for i, j, _ in tree.edges) == ((0, 1), (0, 2))


class TestGreedyKESP:
    def test_k_zero_unchanged(self):
        g = graph_from_dict(3, {(0, 1): 5, (0, 2): 4, (1, 2): 1})
        tree = max_spanning_tree(g)
        assert greedy_k_esp(g, tree, 0) == tree

    def test_k4_single_edge_matches_exhaustive(self):
        g = graph_from_dict(
            4, {(0, 1): 1, (0, 2): 1, (0, 3): 1, (1, 2): 1, (1, 3): 1, (2, 3): 1}
        )
        tree = max_spanning_tree(g)
        got = greedy_k_esp(g, tree, 1)
        best = max(
            tree_connectivity(
                SelectedSubgraph(4, tree.edges + (extra,))
            )
            for extra in g.edges()
            if (extra[0], extra[1]) not in {(i, j) for i, j, _ in tree.edges}
        )
        assert tree_connectivity(got) == pytest.approx(best, abs=1e-9)

    def test_k5_two_edges_against_enumeration(self):
        rng = np.random.default_rng(7)
        pairs = list(itertools.combinations(range(5), 2))
        for trial in range(5):
            wdict = {p: float(rng.integers(1, 9)) for p in pairs}
            g = graph_from_dict(5, wdict)
            tree = max_spanning_tree(g)
            got = greedy_k_esp(g, tree, 2)
            have = {(i, j) for i, j, _ in tree.edges}
            rest = [e for e in g.edges() if (e[0], e[1]) not in have]
            best = max(
                tree_connectivity(SelectedSubgraph(5, tree.edges + combo))
                for combo in itertools.combinations(rest, 2)
            )
            value = tree_connectivity(got)
            # greedy is within the (1 - 1/e) submodular bound; check exactly
            # against enumeration and the bound
            base = tree_connectivity(tree)
            assert value <= best + 1e-9
            assert value - base >= (1 - 1 / math.e) * (best - base) - 1e-9

    def test_rank1_gain_equals_recompute(self):
        rng = np.random.default_rng(3)
        pairs = list(itertools.combinations(range(6), 2))
        wdict = {p: float(rng.integers(1, 20)) for p in pairs}
        g = graph_from_dict(6, wdict)
        tree = max_spanning_tree(g)
        current = tree
        for step in range(3):
            nxt = greedy_k_esp(g, current, 1)
            new_edge = set(nxt.edges) - set(current.edges)
            assert len(new_edge) == 1
            # the accepted gain must equal the from-scratch log-det change
            gain = tree_connectivity(nxt) - tree_connectivity(current)
            have = {(i, j) for i, j, _ in current.edges}
            gains = {}
            for e in g.edges():
                if (e[0], e[1]) in have:
                    continue
                cand = SelectedSubgraph(6, current.edges + (e,))
                gains[(e[0], e[1])] = tree_connectivity(cand) - tree_connectivity(
                    current
                )
            assert gain == pytest.approx(max(gains.values()), abs=1e-9)
            current = nxt

    def test_exhausted_edges_rejected(self):
        g = graph_from_dict(3, {(0, 1): 5, (0, 2): 4, (1, 2): 1})
        tree = max_spanning_tree(g)
        with pytest.raises(DomainError):
            greedy_k_esp(g, tree, 2)


class TestHelpers:
    def test_from_visibility(self):
        vis = np.array(
            [[True, True, False], [True, True, True], [False, True, True]]
        )
        g = MatchGraph.from_visibility(vis)
        assert g.weights[0, 1] == 2  # points 0 and 1 visible in both
        assert g.weights[0, 2] == 1
        assert g.weights[1, 2] == 2

    def test_normalized_weights(self):
        g = graph_from_dict(3, {(0, 1): 10, (0, 2): 5, (1, 2): 2})
        sel = select_subgraph(g, extra_k=1)
        w = edge_weights_normalized(sel)
        assert w.max() == pytest.approx(1.0)
        assert np.all(w > 0)

    def test_selected_always_spanning_connected(self):
        rng = np.random.default_rng(5)
        pairs = [(i, j) for i in range(6) for j in range(i + 1, 6)]
        for _ in range(10):
            wdict = {p: float(rng.integers(1, 30)) for p in pairs}
            g = graph_from_dict(6, wdict)
            k = int(rng.integers(0, 5))
            sel = select_subgraph(g, extra_k=k)
            assert sel.n_edges == 5 + k
            assert tree_connectivity(sel) > float("-inf")
