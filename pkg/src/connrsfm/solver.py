"""Separable parallel reconstruction: pre-step plus four alternating steps.

The full problem couples, per observed point and frame, a depth jet
(depth, first- and second-order normalized derivatives) and, per point and
graph edge, one conformal scale.  Solving everything jointly is ill
conditioned, so the loop decouples the variables:

* pre-step: first-order terms from scratch under an isometric assumption
  (unit scale, zero curvature, one depth-ratio nuisance per point-edge),
  then depth by integration and scales by the closed-form average;
* step 1: second-order terms from the connection equations only;
* step 2: first-order terms from all 21 equations;
* step 3: per-frame depth by integrating the first-order field;
* step 4: per point-edge scale from the scale-sensitive equations.

Steps 1, 2 and 4 are independent per point (or point-edge) and run as one
batched damped-least-squares solve, optionally split into chunks across a
thread pool; step 3 is independent per frame.  Chunking never changes the
arithmetic of any single problem, so results are identical for any thread
count.  The loop stops when the summed parameter motion falls below the
terminal threshold.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    LAMBDA_SENSITIVE_BLOCK_IDX,
    prestep_lambda,
    residual_block,
    residual_scales,
)
from .depthfield import integrate_log_depth
from .errors import IllPosedFitError, UnreconstructablePointError
from .nlls import lm_solve_batch
from .viewgraph import SelectedSubgraph, edge_weights_normalized
from .warps import WarpJetBatch

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    """Knobs of the alternating loop; defaults follow the shipped presets."""

    n_t: int = 3  # inner iteration cap for steps 1, 2 and 4
    sigma: float | None = None  # terminal threshold; None: 1e-4 per variable
    max_outer: int = 20
    damping_init: float = 1e-3
    beta_min: float = 1e-3
    lambda_min: float = 1e-3
    prestep_max_iter: int = 40
    prestep_restarts: int = 2
    depth_grid: tuple = (8, 8)
    depth_smoothing_scale: float = 1e-6
    threads: int = 1
    seed: int = 0
    init_mode: str = "zero"  # "zero" or "random"
    # start the first curvature pass from zero instead of the pre-step
    # estimate; the pre-step here already recovers curvature, so the
    # zero-start is kept only as an option
    reset_curvature: bool = False

    def __post_init__(self):
        if self.n_t < 1 or self.max_outer < 1:
            raise ValueError("iteration caps must be positive")
        if self.beta_min <= 0 or self.lambda_min <= 0 or self.damping_init <= 0:
            raise ValueError("bounds and damping must be positive")
        if self.init_mode not in ("zero", "random"):
            raise ValueError("init_mode must be 'zero' or 'random'")


@dataclass
class ConvergenceTrace:
    terminal: list = field(default_factory=list)
    residual_norm: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def __len__(self):
        return len(self.terminal)


@dataclass
class EdgeData:
    """Per-edge constants: covered points and their warp quantities."""

    frame_i: int
    frame_j: int
    omega: float
    point_ids: np.ndarray
    warp: WarpJetBatch
    scales: np.ndarray | None = None


@dataclass
class ProblemState:
    """All unknowns plus the fixed problem structure."""

    tracks: np.ndarray  # (n_points, n_frames, 2)
    visibility: np.ndarray  # (n_points, n_frames) bool
    jets: np.ndarray  # (n_points, n_frames, 6)
    lambdas: np.ndarray  # (n_points, n_edges)
    graph: SelectedSubgraph
    edges: list
    covered: np.ndarray  # (n_points, n_frames) bool: has a usable edge
    integrated: np.ndarray  # (n_frames,) bool: depth recovered for frame
    prestep_done: bool = False

    @property
    def n_points(self):
        return self.tracks.shape[0]

    @property
    def n_frames(self):
        return self.tracks.shape[1]

    @property
    def active_points(self):
        return np.flatnonzero(self.covered.any(axis=1))

    @property
    def reconstructed_mask(self):
        """Observations with a recovered jet: covered and depth-integrated."""
        return self.covered & self.integrated[None, :]

    def variable_count(self) -> int:
        n_obs = int(self.covered.sum())
        n_lam = sum(len(ed.point_ids) for ed in self.edges)
        return 6 * n_obs + n_lam


def build_problem(
    tracks, visibility, graph: SelectedSubgraph, warp_provider, config: SolverConfig
) -> ProblemState:
    """Assemble the solver state from tracks and fitted (or exact) warps.

    ``warp_provider(frame_i, frame_j, src_pixels)`` returns the warp jet
    batch of the edge's map at the given source pixels; entries it cannot
    produce may be NaN and are dropped with a report.
    """
    tracks = np.asarray(tracks, dtype=float)
    visibility = np.asarray(visibility, dtype=bool)
    n_points, n_frames = visibility.shape
    omegas = edge_weights_normalized(graph)

    edges = []
    covered = np.zeros((n_points, n_frames), dtype=bool)
    for e, (i, j, _) in enumerate(graph.edges):
        pids = np.flatnonzero(visibility[:, i] & visibility[:, j])
        if len(pids) == 0:
            logger.warning("edge (%d, %d) has no co-visible points", i, j)
            edges.append(
                EdgeData(i, j, float(omegas[e]), pids, None)
            )
            continue
        wjb = warp_provider(i, j, tracks[pids, i])
        ok = (
            np.all(np.isfinite(wjb.point), axis=1)
            & np.all(np.isfinite(wjb.jac3.reshape(len(pids), -1)), axis=1)
            & np.all(np.isfinite(wjb.djac3.reshape(len(pids), -1)), axis=1)
        )
        if not np.all(ok):
            logger.warning(
                "edge (%d, %d): dropping %d points with degenerate warp jets",
                i, j, int((~ok).sum()),
            )
        pids = pids[ok]
        wjb = wjb[ok]
        edges.append(EdgeData(i, j, float(omegas[e]), pids, wjb))
        covered[pids, i] = True
        covered[pids, j] = True

    if not covered.any():
        raise UnreconstructablePointError(
            "no point is covered by any selected edge"
        )
    orphan = visibility.any(axis=1) & ~covered.any(axis=1)
    if orphan.any():
        logger.warning(
            "%d points are visible but not covered by selected edges; "
            "they will not be reconstructed", int(orphan.sum()),
        )

    jets = np.zeros((n_points, n_frames, 6))
    jets[:, :, 0] = 1.0
    if config.init_mode == "random":
        rng = np.random.default_rng(config.seed)
        jets[:, :, 1:3] = rng.uniform(-0.1, 0.1, size=(n_points, n_frames, 2))
    lambdas = np.ones((n_points, len(graph.edges)))
    return ProblemState(
        tracks=tracks, visibility=visibility, jets=jets, lambdas=lambdas,
        graph=graph, edges=edges, covered=covered,
        integrated=np.zeros(n_frames, dtype=bool),
    )


def _chunks(ids, n):
    return [c for c in np.array_split(ids, max(1, n)) if len(c)]


def _run_tasks(tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return [f.result() for f in [ex.submit(t) for t in tasks]]


_NOISE_GAIN = 2.0  # cross-fit discrepancy underestimates the error ~2x


def _refresh_scales(state: ProblemState):
    for e, ed in enumerate(state.edges):
        if ed.warp is None or len(ed.point_ids) == 0:
            ed.scales = None
            continue
        scales = residual_scales(
            state.tracks[ed.point_ids, ed.frame_i],
            state.jets[ed.point_ids, ed.frame_i],
            state.tracks[ed.point_ids, ed.frame_j],
            state.jets[ed.point_ids, ed.frame_j],
            ed.warp,
            state.lambdas[ed.point_ids, e],
        )
        if ed.warp.djac3_err is not None:
            # heteroscedastic weighting: the fitted-warp second-derivative
            # error enters the connection equations additively, so each
            # entry's scale absorbs its estimated noise floor
            noise = ed.warp.djac3_err.reshape(len(ed.point_ids), 18)
            scales[:, 3:] = np.sqrt(
                scales[:, 3:] ** 2 + (_NOISE_GAIN * noise) ** 2
            )
        ed.scales = scales


def _edge_maps(state, pids):
    maps = []
    for ed in state.edges:
        if ed.warp is None or len(ed.point_ids) == 0:
            maps.append((np.empty(0, int), np.empty(0, int)))
            continue
        _, idx_b, idx_e = np.intersect1d(
            pids, ed.point_ids, return_indices=True
        )
        maps.append((idx_b, idx_e))
    return maps


def _make_point_residual_fn(state: ProblemState, pids, mode):
    """Batched residual map for per-point sub-problems.

    ``mode``: "prestep" (variables: full jet derivatives y1..y22 per frame
    plus one scale-ratio nuisance per edge, evaluated at unit depth),
    "first" (y1, y2), or "second" (y11, y12, y22; connection entries only).
    """
    n_frames = state.n_frames
    n_edges = len(state.edges)
    base = state.jets[pids].copy()
    if mode == "prestep":
        # unit depth everywhere: the per-edge nuisance absorbs each point's
        # true depth ratio times the conformal scale exactly
        base[:, :, 0] = 1.0
    per = {"prestep": 21, "first": 21, "second": 18}[mode]
    maps = _edge_maps(state, pids)
    lam_rows = state.lambdas[pids]

    def fn(X):
        B = len(X)
        jets = base.copy()
        if mode == "prestep":
            jets[:, :, 1:6] = X[:, : 5 * n_frames].reshape(B, n_frames, 5)
            nuisance = X[:, 5 * n_frames :]
        elif mode == "first":
            jets[:, :, 1:3] = X.reshape(B, n_frames, 2)
        else:
            jets[:, :, 3:6] = X.reshape(B, n_frames, 3)
        F = np.zeros((B, per * n_edges))
        for e, ed in enumerate(state.edges):
            idx_b, idx_e = maps[e]
            if len(idx_b) == 0:
                continue
            lam = nuisance[idx_b, e] if mode == "prestep" else lam_rows[idx_b, e]
            block = residual_block(
                ed.warp.source[idx_e],
                jets[idx_b, ed.frame_i],
                state.tracks[ed.point_ids[idx_e], ed.frame_j],
                jets[idx_b, ed.frame_j],
                ed.warp[idx_e],
                lam,
                ed.omega,
                scales=ed.scales[idx_e],
            )
            if mode == "second":
                block = block[:, 3:]
            F[idx_b, per * e : per * (e + 1)] = block
        return np.nan_to_num(F, nan=np.inf, posinf=np.inf, neginf=np.inf)

    return fn


def _solve_points(state, config, mode, max_iter, starts=None):
    """Run the per-point batched solves, chunked over the thread pool."""
    pids_all = state.active_points
    n_frames = state.n_frames
    n_edges = len(state.edges)
    if mode == "prestep":
        lower = np.concatenate(
            [np.full(5 * n_frames, -np.inf), np.full(n_edges, config.lambda_min)]
        )
    else:
        lower = None

    def task(chunk):
        def run():
            fn = _make_point_residual_fn(state, chunk, mode)
            if mode == "prestep":
                x_cur = np.concatenate(
                    [
                        state.jets[chunk][:, :, 1:6].reshape(len(chunk), -1),
                        np.ones((len(chunk), n_edges)),
                    ],
                    axis=1,
                )
                candidates = [x_cur]
                zero = x_cur.copy()
                zero[:, : 5 * n_frames] = 0.0
                if np.any(zero != x_cur):
                    candidates.append(zero)
                rng = np.random.default_rng(config.seed + 1)
                for _ in range(config.prestep_restarts):
                    rand = zero.copy()
                    y = rng.uniform(-0.3, 0.3, size=(len(chunk), n_frames, 2))
                    rand[:, : 5 * n_frames] = np.concatenate(
                        [y, np.zeros((len(chunk), n_frames, 3))], axis=2
                    ).reshape(len(chunk), -1)
                    candidates.append(rand)
                best_x = None
                best_cost = None
                for x0 in candidates:
                    out = lm_solve_batch(
                        fn, x0, lower=lower, max_iter=max_iter,
                        damping_init=config.damping_init,
                    )
                    cost = np.linalg.norm(fn(out), axis=1)
                    if best_x is None:
                        best_x, best_cost = out, cost
                    else:
                        better = cost < best_cost
                        best_x[better] = out[better]
                        best_cost[better] = cost[better]
                return chunk, best_x
            if mode == "first":
                x0 = state.jets[chunk][:, :, 1:3].reshape(len(chunk), -1)
            else:
                x0 = state.jets[chunk][:, :, 3:6].reshape(len(chunk), -1)
            out = lm_solve_batch(
                fn, x0, lower=lower, max_iter=max_iter,
                damping_init=config.damping_init,
            )
            return chunk, out

        return run

    results = _run_tasks(
        [task(c) for c in _chunks(pids_all, config.threads)], config.threads
    )
    for chunk, out in results:
        if mode == "prestep":
            jets = out[:, : 5 * n_frames].reshape(len(chunk), n_frames, 5)
            state.jets[chunk, :, 1:6] = jets
        elif mode == "first":
            state.jets[chunk, :, 1:3] = out.reshape(len(chunk), n_frames, 2)
        else:
            state.jets[chunk, :, 3:6] = out.reshape(len(chunk), n_frames, 3)


def _bootstrap_schedule(state: ProblemState):
    """Tree traversal for the pairwise bootstrap.

    Returns (root_frame, [(edge_index, anchor_frame, new_frame), ...]) over
    a maximum-weight spanning tree of the selected edges, breadth first
    from the best-covered frame.  Non-tree (extra) edges only join at the
    joint polish.
    """
    n = state.n_frames
    order_eids = sorted(
        range(len(state.edges)),
        key=lambda e: (
            -state.edges[e].omega,
            state.edges[e].frame_i,
            state.edges[e].frame_j,
        ),
    )
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    adj = {f: [] for f in range(n)}
    for eid in order_eids:
        ed = state.edges[eid]
        ri, rj = find(ed.frame_i), find(ed.frame_j)
        if ri != rj:
            parent[ri] = rj
            adj[ed.frame_i].append((eid, ed.frame_j))
            adj[ed.frame_j].append((eid, ed.frame_i))
    root = int(np.argmax(state.covered.sum(axis=0)))
    visited = {root}
    queue = [root]
    schedule = []
    while queue:
        f = queue.pop(0)
        for eid, other in sorted(adj[f]):
            if other not in visited:
                visited.add(other)
                queue.append(other)
                schedule.append((eid, f, other))
    return root, schedule


def _pairwise_solve(state, config, ed, idx_e, solve_src, solve_dst, y_init):
    """Solve one edge's jets for a subset of its points at unit depth.

    ``y_init`` is (n, 2, 5): current derivative values for (src, dst); the
    frames flagged by ``solve_src``/``solve_dst`` are variables, the other
    is held fixed.  Returns refined (n, 2, 5), nuisance and final cost.
    """
    src_px = ed.warp.source[idx_e]
    dst_px = state.tracks[ed.point_ids[idx_e], ed.frame_j]
    wjb = ed.warp[idx_e]
    scales = ed.scales[idx_e]
    n = len(idx_e)
    slots = ([0] if solve_src else []) + ([1] if solve_dst else [])
    n_vars = 5 * len(slots) + 1

    def fn(X):
        js = np.zeros((len(X), 6))
        jd = np.zeros((len(X), 6))
        js[:, 0] = 1.0
        jd[:, 0] = 1.0
        js[:, 1:6] = y_init[:, 0]
        jd[:, 1:6] = y_init[:, 1]
        for c, s in enumerate(slots):
            target = js if s == 0 else jd
            target[:, 1:6] = X[:, 5 * c : 5 * c + 5]
        block = residual_block(
            src_px, js, dst_px, jd, wjb, X[:, -1], ed.omega, scales=scales
        )
        return np.nan_to_num(block, nan=np.inf, posinf=np.inf, neginf=np.inf)

    lower = np.concatenate(
        [np.full(5 * len(slots), -np.inf), [config.lambda_min]]
    )
    rng = np.random.default_rng(config.seed + 17)
    candidates = [np.zeros((n, 5 * len(slots)))]
    start = np.concatenate([y_init[:, s] for s in slots], axis=1)
    if np.any(start != 0.0):
        candidates.insert(0, start)
    for _ in range(max(config.prestep_restarts, 1)):
        c = np.zeros((n, 5 * len(slots)))
        for ci in range(len(slots)):
            c[:, 5 * ci : 5 * ci + 2] = rng.uniform(-0.4, 0.4, size=(n, 2))
        candidates.append(c)
    best_x = best_c = None
    for cand in candidates:
        x0 = np.concatenate([cand, np.ones((n, 1))], axis=1)
        out = lm_solve_batch(
            fn, x0, lower=lower, max_iter=config.prestep_max_iter,
            damping_init=config.damping_init,
        )
        cost = np.linalg.norm(fn(out), axis=1)
        if best_x is None:
            best_x, best_c = out, cost
        else:
            better = cost < best_c
            best_x[better] = out[better]
            best_c[better] = cost[better]
    refined = y_init.copy()
    for c, s in enumerate(slots):
        refined[:, s] = best_x[:, 5 * c : 5 * c + 5]
    return refined, best_x[:, -1], best_c


def _bootstrap_jets(state: ProblemState, config: SolverConfig):
    """Per-point tree bootstrap of all jet derivatives at unit depth."""
    n_points, n_frames = state.visibility.shape
    known = np.zeros((n_points, n_frames), dtype=bool)
    _, schedule = _bootstrap_schedule(state)

    for eid, anchor, new in schedule:
        ed = state.edges[eid]
        if ed.warp is None or len(ed.point_ids) == 0:
            continue
        pts = ed.point_ids
        anchor_is_src = ed.frame_i == anchor
        keys = known[pts, anchor]
        for fresh, idx_all in (
            (True, np.flatnonzero(~keys)),
            (False, np.flatnonzero(keys)),
        ):
            if len(idx_all) == 0:
                continue
            for idx in _chunks(idx_all, config.threads if fresh else 1):
                y_init = np.stack(
                    [
                        state.jets[pts[idx], ed.frame_i, 1:6],
                        state.jets[pts[idx], ed.frame_j, 1:6],
                    ],
                    axis=1,
                )
                if fresh:
                    solve_src = solve_dst = True
                else:
                    solve_src = not anchor_is_src
                    solve_dst = anchor_is_src
                refined, _, _ = _pairwise_solve(
                    state, config, ed, idx, solve_src, solve_dst, y_init
                )
                state.jets[pts[idx], ed.frame_i, 1:6] = refined[:, 0]
                state.jets[pts[idx], ed.frame_j, 1:6] = refined[:, 1]
        known[pts, anchor] = True
        known[pts, new] = True


def _nuisance_init(state, pids):
    """Closed-form metric ratio as the per-edge nuisance start value."""
    from .constraints import metric_sides

    n_edges = len(state.edges)
    out = np.ones((len(pids), n_edges))
    for e, ed in enumerate(state.edges):
        if ed.warp is None or len(ed.point_ids) == 0:
            continue
        _, idx_b, idx_e = np.intersect1d(pids, ed.point_ids, return_indices=True)
        if len(idx_b) == 0:
            continue
        js = state.jets[pids[idx_b], ed.frame_i].copy()
        jd = state.jets[pids[idx_b], ed.frame_j].copy()
        js[:, 0] = 1.0
        jd[:, 0] = 1.0
        G1, W = metric_sides(
            ed.warp.source[idx_e], js,
            state.tracks[ed.point_ids[idx_e], ed.frame_j], jd, ed.warp[idx_e],
        )
        num = np.einsum("nij,nij->n", G1, W)
        den = np.einsum("nij,nij->n", W, W)
        r2 = num / np.maximum(den, 1e-12)
        out[idx_b, e] = np.sqrt(np.maximum(r2, 1e-6))
    return out


def prestep(state: ProblemState, config: SolverConfig) -> ProblemState:
    """Initialize jets, depth and scales from scratch.

    Each point's jet derivatives are bootstrapped edge by edge along a
    spanning tree (two-frame solves, then one-frame extensions), jointly
    polished over all edges with per-edge depth-ratio nuisances at unit
    depth, and repaired from neighboring solutions where the polish missed.
    Depth then comes from per-frame integration, scales from the
    eleven-estimate closed-form average, and the curvature terms are reset
    to zero so the first main-loop pass starts them fresh.
    """
    state.jets[:, :, 3:6] = 0.0
    _refresh_scales(state)
    _bootstrap_jets(state, config)

    # joint polish over all edges, warm started from the bootstrap
    pids_all = state.active_points
    n_frames = state.n_frames

    def polish(pids):
        fn = _make_point_residual_fn(state, pids, "prestep")
        x0 = np.concatenate(
            [
                state.jets[pids][:, :, 1:6].reshape(len(pids), -1),
                _nuisance_init(state, pids),
            ],
            axis=1,
        )
        lower = np.concatenate(
            [
                np.full(5 * n_frames, -np.inf),
                np.full(len(state.edges), config.lambda_min),
            ]
        )
        out = lm_solve_batch(
            fn, x0, lower=lower, max_iter=config.prestep_max_iter,
            damping_init=config.damping_init,
        )
        state.jets[pids, :, 1:6] = out[:, : 5 * n_frames].reshape(
            len(pids), n_frames, 5
        )
        return np.linalg.norm(fn(out), axis=1)

    costs = np.concatenate(
        [
            polish(c)
            for c in _chunks(pids_all, config.threads)
        ]
    )

    # repair stragglers from the nearest well-solved neighbor's field
    anchor_frame = int(np.argmax(state.covered.sum(axis=0)))
    for _ in range(2):
        floor = max(np.median(costs) * 20.0, 1e-5)
        bad = costs > floor
        if not bad.any() or bad.all():
            break
        good_ids = pids_all[~bad]
        bad_ids = pids_all[bad]
        ref = state.tracks[:, anchor_frame]
        for p in bad_ids:
            d = np.linalg.norm(ref[good_ids] - ref[p], axis=1)
            q = good_ids[np.argmin(d)]
            state.jets[p, :, 1:6] = state.jets[q, :, 1:6]
        new_costs = polish(bad_ids)
        improved_total = new_costs.sum() < costs[bad].sum()
        costs[bad] = new_costs
        if not improved_total:
            break

    step3_depth(state, config)

    for e, ed in enumerate(state.edges):
        if ed.warp is None or len(ed.point_ids) == 0:
            continue
        lam = prestep_lambda(
            state.tracks[ed.point_ids, ed.frame_i],
            state.jets[ed.point_ids, ed.frame_i],
            state.tracks[ed.point_ids, ed.frame_j],
            state.jets[ed.point_ids, ed.frame_j],
            ed.warp,
            reduce=False,
        )
        bad = ~np.isfinite(lam) | (lam <= 0)
        if np.any(bad):
            logger.warning(
                "edge (%d, %d): %d degenerate scale estimates reset to 1",
                ed.frame_i, ed.frame_j, int(bad.sum()),
            )
            lam = np.where(bad, 1.0, lam)
        state.lambdas[ed.point_ids, e] = np.maximum(lam, config.lambda_min)
    if config.reset_curvature:
        state.jets[:, :, 3:6] = 0.0
    state.prestep_done = True
    return state


def step1_second_order(state: ProblemState, config: SolverConfig) -> ProblemState:
    """Refine curvature terms from the connection equations only."""
    _refresh_scales(state)
    _solve_points(state, config, "second", config.n_t)
    return state


def step2_first_order(state: ProblemState, config: SolverConfig) -> ProblemState:
    """Refine first-order terms from all 21 equations."""
    _refresh_scales(state)
    _solve_points(state, config, "first", config.n_t)
    return state


def step3_depth(state: ProblemState, config: SolverConfig) -> ProblemState:
    """Replace each frame's depths by the integrated first-order field."""

    def task(frame):
        def run():
            pids = np.flatnonzero(state.covered[:, frame])
            if len(pids) < 3:
                return frame, None, None
            side = int(
                np.clip(np.floor(np.sqrt(len(pids) / 1.5)), 4, config.depth_grid[0])
            )
            try:
                beta, _ = integrate_log_depth(
                    state.tracks[pids, frame],
                    state.jets[pids, frame, 1:3],
                    grid=(side, side),
                    smoothing=config.depth_smoothing_scale * len(pids),
                )
            except IllPosedFitError:
                return frame, None, None
            return frame, pids, np.maximum(beta, config.beta_min)

        return run

    frames = list(range(state.n_frames))
    results = _run_tasks([task(f) for f in frames], config.threads)
    for frame, pids, beta in results:
        if pids is None:
            if state.covered[:, frame].any():
                logger.warning("frame %d: depth integration skipped", frame)
            state.integrated[frame] = False
            continue
        state.jets[pids, frame, 0] = beta
        state.integrated[frame] = True
    return state


def step4_lambda(state: ProblemState, config: SolverConfig) -> ProblemState:
    """Refine each point-edge scale over the scale-sensitive residuals."""
    _refresh_scales(state)
    sens = list(LAMBDA_SENSITIVE_BLOCK_IDX)

    def task(e, ed, idx):
        def run():
            src_px = ed.warp.source[idx]
            dst_px = state.tracks[ed.point_ids[idx], ed.frame_j]
            js = state.jets[ed.point_ids[idx], ed.frame_i]
            jd = state.jets[ed.point_ids[idx], ed.frame_j]
            wjb = ed.warp[idx]
            scales = ed.scales[idx]

            def fn(X):
                block = residual_block(
                    src_px, js, dst_px, jd, wjb, X[:, 0], ed.omega, scales=scales
                )
                return np.nan_to_num(
                    block[:, sens], nan=np.inf, posinf=np.inf, neginf=np.inf
                )

            x0 = state.lambdas[ed.point_ids[idx], e][:, None]
            out = lm_solve_batch(
                fn, x0, lower=np.array([config.lambda_min]),
                max_iter=config.n_t, damping_init=config.damping_init,
            )
            return e, idx, out[:, 0]

        return run

    tasks = []
    for e, ed in enumerate(state.edges):
        if ed.warp is None or len(ed.point_ids) == 0:
            continue
        for idx in _chunks(np.arange(len(ed.point_ids)), config.threads):
            tasks.append(task(e, ed, idx))
    for e, idx, lam in _run_tasks(tasks, config.threads):
        ed = state.edges[e]
        state.lambdas[ed.point_ids[idx], e] = lam
    return state


def total_residual_norm(state: ProblemState) -> float:
    """Norm of all weighted, scaled residual blocks at the current state."""
    _refresh_scales(state)
    total = 0.0
    for e, ed in enumerate(state.edges):
        if ed.warp is None or len(ed.point_ids) == 0:
            continue
        block = residual_block(
            state.tracks[ed.point_ids, ed.frame_i],
            state.jets[ed.point_ids, ed.frame_i],
            state.tracks[ed.point_ids, ed.frame_j],
            state.jets[ed.point_ids, ed.frame_j],
            ed.warp,
            state.lambdas[ed.point_ids, e],
            ed.omega,
            scales=ed.scales,
        )
        total += float(np.nansum(block * block))
    return float(np.sqrt(total))


def _terminal_value(state, prev_jets, prev_lambdas) -> float:
    mask = state.covered
    diff = state.jets - prev_jets
    per_obs = np.sqrt(np.einsum("pfk,pfk->pf", diff, diff))
    value = float(per_obs[mask].sum())
    for e, ed in enumerate(state.edges):
        if len(ed.point_ids) == 0:
            continue
        value += float(
            np.abs(
                state.lambdas[ed.point_ids, e] - prev_lambdas[ed.point_ids, e]
            ).sum()
        )
    return value


def run(state: ProblemState, config: SolverConfig):
    """Full loop: pre-step if needed, then steps 1-4 until the terminal
    condition or the outer cap.  Returns the state and the trace."""
    if not state.prestep_done:
        prestep(state, config)
    sigma = config.sigma
    if sigma is None:
        sigma = 1e-4 * state.variable_count()

    trace = ConvergenceTrace()
    for k in range(config.max_outer):
        t0 = time.perf_counter()
        prev_jets = state.jets.copy()
        prev_lambdas = state.lambdas.copy()
        step1_second_order(state, config)
        step2_first_order(state, config)
        step3_depth(state, config)
        step4_lambda(state, config)
        terminal = _terminal_value(state, prev_jets, prev_lambdas)
        trace.terminal.append(terminal)
        trace.residual_norm.append(total_residual_norm(state))
        trace.wall_time.append(time.perf_counter() - t0)
        logger.info(
            "outer %d: terminal %.3e (sigma %.3e), residual %.3e",
            k + 1, terminal, sigma, trace.residual_norm[-1],
        )
        if terminal < sigma:
            break
    return state, trace
