"""View-graph construction and well-connected edge selection.

Frames are nodes of a complete weighted graph whose edge weights count
co-visible matched features.  A subgraph of a given edge budget is chosen
to maximize tree-connectivity, the log-determinant of the reduced weighted
Laplacian: a maximum spanning tree first (Kruskal), then greedy additions
scored by a rank-1 determinant update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraphError, DomainError


@dataclass(frozen=True)
class MatchGraph:
    """Complete weighted view graph; weights count co-visible features."""

    weights: np.ndarray  # (n_c, n_c) symmetric, zero diagonal

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DomainError("weights must be a square matrix")
        if not np.allclose(w, w.T):
            raise DomainError("weights must be symmetric")
        if np.any(np.diag(w) != 0):
            raise DomainError("weights must have a zero diagonal")
        if np.any(w < 0):
            raise DomainError("weights must be nonnegative")

    @property
    def n_frames(self) -> int:
        return self.weights.shape[0]

    def edges(self):
        """All positive-weight edges as (i, j, w) with i < j, id-ordered."""
        n = self.n_frames
        out = []
        for i in range(n):
            for j in range(i + 1, n):
                if self.weights[i, j] > 0:
                    out.append((i, j, float(self.weights[i, j])))
        return out

    @classmethod
    def from_visibility(cls, visibility) -> "MatchGraph":
        vis = np.asarray(visibility, dtype=bool)
        w = (vis.T.astype(float) @ vis.astype(float))
        np.fill_diagonal(w, 0.0)
        return cls(w)


@dataclass(frozen=True)
class SelectedSubgraph:
    """Chosen edge set spanning all frames."""

    n_frames: int
    edges: tuple  # of (i, j, weight)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_index(self) -> dict:
        return {(i, j): e for e, (i, j, _) in enumerate(self.edges)}

    def incident(self, frame: int):
        return [e for e, (i, j, _) in enumerate(self.edges) if frame in (i, j)]


def _reduced_laplacian(n: int, edges) -> np.ndarray:
    L = np.zeros((n, n))
    for i, j, w in edges:
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w
    return L[1:, 1:]


def _components(n: int, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, _ in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for k in range(n):
        groups.setdefault(find(k), []).append(k)
    return list(groups.values())


def tree_connectivity(graph: SelectedSubgraph) -> float:
    """Log-determinant of the reduced weighted Laplacian.

    Equals the log of the weighted spanning-tree count (matrix-tree
    theorem).  Disconnected graphs return -inf.
    """
    comps = _components(graph.n_frames, graph.edges)
    if len(comps) > 1:
        return float("-inf")
    if graph.n_frames == 1:
        return 0.0
    L = _reduced_laplacian(graph.n_frames, graph.edges)
    sign, logdet = np.linalg.slogdet(L)
    if sign <= 0:
        return float("-inf")
    return float(logdet)


def max_spanning_tree(graph: MatchGraph) -> SelectedSubgraph:
    """Kruskal maximum spanning tree; ties broken by lowest (i, j) edge id."""
    n = graph.n_frames
    edges = graph.edges()
    comps = _components(n, edges)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)

    # sort by descending weight, then ascending edge id
    order = sorted(edges, key=lambda e: (-e[2], e[0], e[1]))
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    chosen = []
    for i, j, w in order:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            chosen.append((i, j, w))
        if len(chosen) == n - 1:
            break
    chosen.sort(key=lambda e: (e[0], e[1]))
    return SelectedSubgraph(n_frames=n, edges=tuple(chosen))


def greedy_k_esp(
    graph: MatchGraph, tree: SelectedSubgraph, k: int
) -> SelectedSubgraph:
    """Add ``k`` extra edges greedily by tree-connectivity gain.

    Each step evaluates every remaining edge by the rank-1 update
    ``log(1 + w a' L^-1 a)`` of the reduced-Laplacian determinant and takes
    the largest; ties resolve to the lowest (i, j) edge id.
    """
    if k < 0:
        raise DomainError("k must be nonnegative")
    n = graph.n_frames
    selected = list(tree.edges)
    have = {(i, j) for i, j, _ in selected}
    remaining = [e for e in graph.edges() if (e[0], e[1]) not in have]
    if k > len(remaining):
        raise DomainError(
            f"requested {k} extra edges but only {len(remaining)} remain"
        )

    L = _reduced_laplacian(n, selected)
    for _ in range(k):
        Linv = np.linalg.inv(L)
        best = None
        for i, j, w in remaining:
            a = np.zeros(n - 1)
            if i > 0:
                a[i - 1] = 1.0
            if j > 0:
                a[j - 1] -= 1.0
            gain = float(np.log1p(w * a @ Linv @ a))
            key = (-gain, i, j)
            if best is None or key < best[0]:
                best = (key, (i, j, w), a)
        _, edge, a = best
        selected.append(edge)
        remaining.remove(edge)
        L = L + edge[2] * np.outer(a, a)

    selected.sort(key=lambda e: (e[0], e[1]))
    return SelectedSubgraph(n_frames=n, edges=tuple(selected))


def select_subgraph(graph: MatchGraph, extra_k: int = 0) -> SelectedSubgraph:
    """Spanning tree plus ``extra_k`` greedy edges."""
    tree = max_spanning_tree(graph)
    if extra_k == 0:
        return tree
    return greedy_k_esp(graph, tree, extra_k)


def edge_weights_normalized(selected: SelectedSubgraph) -> np.ndarray:
    """Per-edge solver weights: match counts scaled by the maximum count."""
    w = np.array([e[2] for e in selected.edges], dtype=float)
    top = w.max()
    if top <= 0:
        raise DomainError("selected subgraph has no positive edge weight")
    return w / top
