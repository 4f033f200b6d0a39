"""End-to-end reconstruction: edge selection, warp fitting, solving.

This is the orchestration layer behind the command-line ``reconstruct``:
build the co-visibility graph, select a well-connected edge set, fit
forward and inverse warps per edge, run the separable solver, and package
per-frame outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .depthfield import normal_from_jet
from .errors import DomainError, IllPosedFitError
from .solver import ProblemState, SolverConfig, build_problem, run
from .viewgraph import MatchGraph, SelectedSubgraph, select_subgraph
from .warps import CorrespondenceSet, fit_warp_pair, warp_jets

logger = logging.getLogger(__name__)

# Edges with fewer co-visible points than the stable-fit minimum fall back
# to a single-patch spline with extra smoothing; below the hard floor the
# edge is unusable.
MIN_PAIRS_HARD = 6


@dataclass
class PipelineConfig:
    """Everything the reconstruction pipeline needs besides the tracks."""

    extra_k: int = 0
    warp_grid: tuple = (8, 8)
    warp_smoothing_scale: float = 1e-8
    solver: SolverConfig = field(default_factory=SolverConfig)


def _fit_one_edge(src, dst, i, j, cfg):
    n = len(src)
    # the control grid tracks the sample count so sparse edges do not ride
    # the smoothing prior through an under-determined fit
    side = int(np.clip(np.floor(np.sqrt(n / 1.5)), 4, cfg.warp_grid[0]))
    smoothing = cfg.warp_smoothing_scale * n
    if n < 16:
        smoothing = max(cfg.warp_smoothing_scale, 1e-6) * n * 10.0
    corr = CorrespondenceSet(
        src, dst, i, j, min_pairs=MIN_PAIRS_HARD if n < 16 else 16
    )
    return fit_warp_pair(corr, grid=(side, side), smoothing=smoothing)


def _spanning_tree_adjacency(graph: SelectedSubgraph):
    """Max-weight spanning tree of the selected edges, as adjacency."""
    n = graph.n_frames
    order = sorted(graph.edges, key=lambda e: (-e[2], e[0], e[1]))
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    adj = {f: [] for f in range(n)}
    for i, j, _ in order:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            adj[i].append(j)
            adj[j].append(i)
    return adj


def _hop_paths(adj, n_frames):
    """Tree paths between all frame pairs, as lists of frames."""
    paths = {}
    for start in range(n_frames):
        prev = {start: None}
        queue = [start]
        while queue:
            f = queue.pop(0)
            for g in sorted(adj[f]):
                if g not in prev:
                    prev[g] = f
                    queue.append(g)
        for goal in prev:
            path = [goal]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            paths[(start, goal)] = path[::-1]
    return paths


def _chain_warp(models, directed, path, pixels):
    """Map pixels along consecutive tree hops; NaN where any hop leaves a
    model's fitted domain (basis evaluation clamps, so validity must be
    tracked explicitly)."""
    p = np.asarray(pixels, dtype=float).copy()
    valid = np.ones(len(p), dtype=bool)
    for a, b in zip(path[:-1], path[1:]):
        if (a, b) in directed:
            pair = models[directed[(a, b)]]
            model = None if pair is None else pair[0]
        else:
            pair = models[directed[(b, a)]]
            model = None if pair is None else pair[1]
        if model is None:
            return np.full_like(p, np.nan)
        safe = np.where(valid[:, None], p, 0.0)
        valid &= model.contains(safe)
        p = model(safe, check=False)
    p[~valid] = np.nan
    return p


def _synthesize_pairs(tracks, visibility, models, directed, paths, a, b):
    """Extra (a, b) correspondences chained through the tree.

    Points not co-visible at (a, b) but visible elsewhere are carried to
    both frames along tree paths using the current warp values; chains that
    exit any model's domain are dropped.
    """
    n_points, n_frames = visibility.shape
    covis = visibility[:, a] & visibility[:, b]
    src_rows, dst_rows = [], []
    for p in np.flatnonzero(~covis & visibility.any(axis=1)):
        frames = np.flatnonzero(visibility[p])
        # nearest visible frame to each endpoint, by tree path length
        best_a = min(frames, key=lambda f: (len(paths[(f, a)]), f))
        best_b = min(frames, key=lambda f: (len(paths[(f, b)]), f))
        at_a = _chain_warp(models, directed, paths[(best_a, a)], tracks[p, best_a][None])
        at_b = _chain_warp(models, directed, paths[(best_b, b)], tracks[p, best_b][None])
        if np.all(np.isfinite(at_a)) and np.all(np.isfinite(at_b)):
            src_rows.append(at_a[0])
            dst_rows.append(at_b[0])
    if not src_rows:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.array(src_rows), np.array(dst_rows)


def fit_edge_warp_models(
    tracks, visibility, graph: SelectedSubgraph, cfg, transitive_sweeps: int = 2
):
    """Fit forward/inverse warp models for every selected edge.

    After an initial independent fit per edge, ``transitive_sweeps`` passes
    augment each edge's correspondences with pairs chained through the
    spanning tree: a point that is not co-visible on the edge still pins
    the warp wherever the current warp values can carry it to both frames.
    Warp values are far more accurate than warp derivatives, so chained
    pairs are nearly as informative as direct ones; this is what keeps
    sparse-visibility fits usable.  Edges under the hard pair floor are
    reported and skipped.
    """
    models = {}
    direct = {}
    for i, j, _ in graph.edges:
        vis = visibility[:, i] & visibility[:, j]
        n = int(vis.sum())
        direct[(i, j)] = vis
        if n < MIN_PAIRS_HARD:
            logger.warning(
                "edge (%d, %d): only %d co-visible points; edge skipped", i, j, n
            )
            models[(i, j)] = None
            continue
        try:
            models[(i, j)] = _fit_one_edge(tracks[vis, i], tracks[vis, j], i, j, cfg)
        except IllPosedFitError:
            logger.warning("edge (%d, %d): warp fit ill posed; edge skipped", i, j)
            models[(i, j)] = None

    full = all(
        int(v.sum()) == visibility.shape[0] for v in direct.values()
    )
    if transitive_sweeps <= 0 or full:
        return models

    directed = {(i, j): (i, j) for i, j, _ in graph.edges}
    adj = _spanning_tree_adjacency(graph)
    paths = _hop_paths(adj, graph.n_frames)
    for _ in range(transitive_sweeps):
        new_models = {}
        for i, j, _ in graph.edges:
            vis = direct[(i, j)]
            syn_src, syn_dst = _synthesize_pairs(
                tracks, visibility, models, directed, paths, i, j
            )
            if len(syn_src):
                # keep chained pairs inside the directly observed hulls;
                # extrapolated chains are unreliable
                lo_s = tracks[vis, i].min(axis=0)
                hi_s = tracks[vis, i].max(axis=0)
                lo_d = tracks[vis, j].min(axis=0)
                hi_d = tracks[vis, j].max(axis=0)
                pad_s = 0.10 * (hi_s - lo_s)
                pad_d = 0.10 * (hi_d - lo_d)
                ok = (
                    np.all(syn_src >= lo_s - pad_s, axis=1)
                    & np.all(syn_src <= hi_s + pad_s, axis=1)
                    & np.all(syn_dst >= lo_d - pad_d, axis=1)
                    & np.all(syn_dst <= hi_d + pad_d, axis=1)
                )
                syn_src, syn_dst = syn_src[ok], syn_dst[ok]
            src = np.vstack([tracks[vis, i], syn_src])
            dst = np.vstack([tracks[vis, j], syn_dst])
            keep = ~_duplicate_rows(src)
            src, dst = src[keep], dst[keep]
            if len(src) < MIN_PAIRS_HARD:
                new_models[(i, j)] = models[(i, j)]
                continue
            try:
                new_models[(i, j)] = _fit_one_edge(src, dst, i, j, cfg)
            except IllPosedFitError:
                new_models[(i, j)] = models[(i, j)]
        models = new_models
    return models


def _duplicate_rows(arr):
    """Mask of rows equal to an earlier row."""
    seen = {}
    dup = np.zeros(len(arr), dtype=bool)
    for k, row in enumerate(map(tuple, np.round(arr, 12))):
        if row in seen:
            dup[k] = True
        else:
            seen[row] = k
    return dup


def _inverse_implied_djac3(fwd_batch, bwd_batch):
    """dJ3 of the forward warp implied by the inverse model's derivatives.

    Differentiating J_fwd = J_bwd(warped)^-1 gives an independent estimate
    of the forward second derivatives; its disagreement with the directly
    fitted value estimates the fit error entry by entry.
    """
    Jf = fwd_batch.jac
    dJb = bwd_batch.djac3[:, :, :2, :2]
    est = np.zeros_like(fwd_batch.djac3)
    for k in (0, 1):
        acc = np.zeros_like(Jf)
        for l in (0, 1):
            term = -np.einsum("nij,njk,nkl->nil", Jf, dJb[:, l], Jf)
            acc += Jf[:, l, k][:, None, None] * term
        est[:, k, :2, :2] = acc
        est[:, k, 2, 2] = (
            acc[:, 0, 0] * Jf[:, 1, 1]
            + Jf[:, 0, 0] * acc[:, 1, 1]
            - acc[:, 0, 1] * Jf[:, 1, 0]
            - Jf[:, 0, 1] * acc[:, 1, 0]
        )
    return est


def spline_warp_provider(models):
    def provider(i, j, src_pixels):
        pair = models[(i, j)]
        if pair is None:
            return warp_jets_nan(src_pixels)
        fwd, bwd = pair
        batch = warp_jets(fwd, bwd, src_pixels, check=False)
        bwd_batch = warp_jets(bwd, fwd, batch.point, check=False)
        est = _inverse_implied_djac3(batch, bwd_batch)
        err = np.abs(batch.djac3 - est)
        batch.djac3_err = np.nan_to_num(err, nan=0.0)
        return batch

    return provider


def warp_jets_nan(src_pixels):
    from .warps import WarpJetBatch

    n = len(src_pixels)
    return WarpJetBatch(
        source=np.asarray(src_pixels, dtype=float),
        point=np.full((n, 2), np.nan),
        jac=np.full((n, 2, 2), np.nan),
        jac3=np.full((n, 3, 3), np.nan),
        djac3=np.full((n, 2, 3, 3), np.nan),
        inv_jac=np.full((n, 2, 2), np.nan),
    )


@dataclass
class ReconstructionResult:
    state: ProblemState
    trace: object
    graph: SelectedSubgraph

    def frame_outputs(self, frame: int):
        """Reconstructed point ids, 3D points and unit normals for a frame."""
        pids = np.flatnonzero(self.state.reconstructed_mask[:, frame])
        px = self.state.tracks[pids, frame]
        jets = self.state.jets[pids, frame]
        pts = jets[:, 0, None] * np.column_stack([px, np.ones(len(pids))])
        normals = normal_from_jet(px, jets) if len(pids) else np.zeros((0, 3))
        return pids, pts, normals


def orient_edges(tracks, visibility, graph: SelectedSubgraph) -> SelectedSubgraph:
    """Point each edge from the frame with the larger image hull.

    Fitting the contracting direction keeps the warp's second derivatives
    well constrained by the samples; the expanding inverse is fitted from
    swapped correspondences as usual.
    """
    edges = []
    for i, j, w in graph.edges:
        vis = visibility[:, i] & visibility[:, j]
        if vis.sum() >= 2:
            area_i = float(np.prod(np.ptp(tracks[vis, i], axis=0)))
            area_j = float(np.prod(np.ptp(tracks[vis, j], axis=0)))
            if area_i < area_j:
                i, j = j, i
        edges.append((i, j, w))
    return SelectedSubgraph(n_frames=graph.n_frames, edges=tuple(edges))


def reconstruct(tracks, visibility, cfg: PipelineConfig) -> ReconstructionResult:
    """Run the full pipeline on tracked, calibration-normalized points."""
    tracks = np.asarray(tracks, dtype=float)
    visibility = np.asarray(visibility, dtype=bool)
    graph = select_subgraph(
        MatchGraph.from_visibility(visibility), extra_k=cfg.extra_k
    )
    graph = orient_edges(tracks, visibility, graph)
    models = fit_edge_warp_models(tracks, visibility, graph, cfg)
    provider = spline_warp_provider(models)
    state = build_problem(tracks, visibility, graph, provider, cfg.solver)
    state, trace = run(state, cfg.solver)
    return ReconstructionResult(state=state, trace=trace, graph=graph)
