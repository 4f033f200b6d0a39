"""Smooth pairwise image warps and scalar surfaces from scattered samples.

The engine is a tensor-product cubic B-spline fitted by penalized least
squares: squared data residuals plus a bending-energy term (integral of
squared second derivatives).  That gives exact, continuous first and second
derivatives everywhere inside the fitted bounding box, which is what the
constraint equations consume.  Queries outside the box are errors, not
extrapolations.

A warp is a pair of such surfaces (target u and target v as functions of
the source pixel).  Inverse warps are fitted independently from swapped
correspondences rather than inverted numerically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateWarpError, DomainError, ExtrapolationError, IllPosedFitError

logger = logging.getLogger(__name__)

_DEGREE = 3
_MIN_PAIRS = 16
_MIN_GRID = 4
_DET_EPS = 1e-8
# Margin (relative to box size) tolerated when testing domain membership.
_BOX_SLACK = 1e-9


def default_smoothing(n_pairs: int, scale: float = 1e-4) -> float:
    """Default bending-energy weight for a fit with ``n_pairs`` samples."""
    return scale * n_pairs


def _clamped_knots(n_ctrl: int, lo: float, hi: float) -> np.ndarray:
    n_interior = n_ctrl - _DEGREE - 1
    if n_interior > 0:
        interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    else:
        interior = np.empty(0)
    return np.concatenate(
        [np.full(_DEGREE + 1, lo), interior, np.full(_DEGREE + 1, hi)]
    )


def _basis_matrix(knots: np.ndarray, n_ctrl: int, x: np.ndarray, deriv: int = 0):
    """All basis functions (or their derivatives) evaluated at x: (len(x), n_ctrl)."""
    spl = BSpline(knots, np.eye(n_ctrl), _DEGREE, extrapolate=False)
    if deriv:
        spl = spl.derivative(deriv)
    x = np.clip(np.asarray(x, dtype=float), knots[0], knots[-1])
    vals = spl(x)
    return np.nan_to_num(vals, nan=0.0)


def _gram_1d(knots: np.ndarray, n_ctrl: int, deriv: int) -> np.ndarray:
    """Gram matrix of basis derivative products, integrated over the domain."""
    # 4-point Gauss-Legendre per knot span is exact for products of
    # piecewise-cubic derivatives
    nodes, weights = np.polynomial.legendre.leggauss(4)
    spans = np.unique(knots)
    G = np.zeros((n_ctrl, n_ctrl))
    for a, b in zip(spans[:-1], spans[1:]):
        if b <= a:
            continue
        half = 0.5 * (b - a)
        xs = 0.5 * (a + b) + half * nodes
        rows = _basis_matrix(knots, n_ctrl, xs, deriv=deriv)
        G += (rows * (weights * half)[:, None]).T @ rows
    return G


@dataclass(frozen=True)
class SplineSurface:
    """Single scalar tensor-product cubic spline over a rectangle."""

    knots_u: np.ndarray
    knots_v: np.ndarray
    coeffs: np.ndarray  # (n_u, n_v)
    bbox: tuple  # (u_min, u_max, v_min, v_max)

    @property
    def grid(self):
        return self.coeffs.shape

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        u0, u1, v0, v1 = self.bbox
        su = _BOX_SLACK * max(u1 - u0, 1.0)
        sv = _BOX_SLACK * max(v1 - v0, 1.0)
        return (
            (p[:, 0] >= u0 - su)
            & (p[:, 0] <= u1 + su)
            & (p[:, 1] >= v0 - sv)
            & (p[:, 1] <= v1 + sv)
        )

    def evaluate(self, points, du: int = 0, dv: int = 0, *, check: bool = True):
        """Evaluate the surface (or a derivative) at ``(..., 2)`` points."""
        p = np.asarray(points, dtype=float)
        squeeze = p.ndim == 1
        p = np.atleast_2d(p)
        if check and not np.all(self.contains(p)):
            raise ExtrapolationError("query point outside fitted spline domain")
        n_u, n_v = self.coeffs.shape
        bu = _basis_matrix(self.knots_u, n_u, p[:, 0], deriv=du)
        bv = _basis_matrix(self.knots_v, n_v, p[:, 1], deriv=dv)
        vals = np.einsum("ni,ij,nj->n", bu, self.coeffs, bv)
        return vals[0] if squeeze else vals


def _design_rows(knots_u, knots_v, n_u, n_v, points, du=0, dv=0):
    bu = _basis_matrix(knots_u, n_u, points[:, 0], deriv=du)
    bv = _basis_matrix(knots_v, n_v, points[:, 1], deriv=dv)
    return (bu[:, :, None] * bv[:, None, :]).reshape(len(points), n_u * n_v)


def _bending_gram(knots_u, knots_v, n_u, n_v) -> np.ndarray:
    gu0 = _gram_1d(knots_u, n_u, 0)
    gu1 = _gram_1d(knots_u, n_u, 1)
    gu2 = _gram_1d(knots_u, n_u, 2)
    gv0 = _gram_1d(knots_v, n_v, 0)
    gv1 = _gram_1d(knots_v, n_v, 1)
    gv2 = _gram_1d(knots_v, n_v, 2)
    return np.kron(gu2, gv0) + 2.0 * np.kron(gu1, gv1) + np.kron(gu0, gv2)


def _solve_penalized(design, targets, penalty, smoothing):
    """Solve (D'D + s P) c = D't for one or more target channels."""
    normal = design.T @ design + smoothing * penalty
    rhs = design.T @ targets
    try:
        factor = cho_factor(normal)
    except np.linalg.LinAlgError as exc:
        raise IllPosedFitError(
            "spline normal equations are rank deficient; "
            "increase the smoothing weight"
        ) from exc
    coeffs = cho_solve(factor, rhs)
    # Cholesky can succeed on nearly singular systems; reject those too.
    if not np.all(np.isfinite(coeffs)):
        raise IllPosedFitError(
            "spline fit produced non-finite coefficients; increase smoothing"
        )
    return coeffs


def _fit_surfaces(points, targets, grid, smoothing, bbox=None):
    """Shared penalized LSQ over one bounding box; targets (N, channels)."""
    points = np.asarray(points, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n_u, n_v = grid
    if n_u < _MIN_GRID or n_v < _MIN_GRID:
        raise DomainError(f"control grid must be at least {_MIN_GRID}x{_MIN_GRID}")
    if smoothing < 0:
        raise DomainError("smoothing weight must be nonnegative")
    if bbox is None:
        bbox = (
            points[:, 0].min(),
            points[:, 0].max(),
            points[:, 1].min(),
            points[:, 1].max(),
        )
    u0, u1, v0, v1 = bbox
    if not (u1 > u0 and v1 > v0):
        raise IllPosedFitError("degenerate bounding box: samples are collinear")
    knots_u = _clamped_knots(n_u, u0, u1)
    knots_v = _clamped_knots(n_v, v0, v1)
    design = _design_rows(knots_u, knots_v, n_u, n_v, points)
    penalty = _bending_gram(knots_u, knots_v, n_u, n_v)
    coeffs = _solve_penalized(design, targets, penalty, smoothing)
    fitted = design @ coeffs
    rms = float(np.sqrt(np.mean((fitted - targets) ** 2)))
    surfaces = [
        SplineSurface(knots_u, knots_v, coeffs[:, c].reshape(n_u, n_v), bbox)
        for c in range(targets.shape[1])
    ]
    return surfaces, rms


@dataclass(frozen=True)
class ScalarSurfaceModel:
    """Fitted scalar spline plus fit diagnostics."""

    surface: SplineSurface
    residual_rms: float

    @property
    def bbox(self):
        return self.surface.bbox

    def __call__(self, points, du=0, dv=0):
        return self.surface.evaluate(points, du=du, dv=dv)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched pixel pairs between two frames.

    ``min_pairs`` defaults to the stable-fit minimum of 16; pipelines with
    heavy missing data may lower it explicitly and pay with smoothing.
    """

    source: np.ndarray  # (N, 2)
    target: np.ndarray  # (N, 2)
    frame_i: int = 0
    frame_j: int = 1
    min_pairs: int = _MIN_PAIRS

    def __post_init__(self):
        src = np.asarray(self.source, dtype=float)
        tgt = np.asarray(self.target, dtype=float)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 2:
            raise DomainError("source/target must both be (N, 2) arrays")
        if len(src) < self.min_pairs:
            raise DomainError(
                f"need at least {self.min_pairs} correspondences, got {len(src)}"
            )
        uniq = np.unique(src, axis=0)
        if len(uniq) != len(src):
            raise DomainError("duplicate source pixels in correspondence set")

    def swapped(self) -> "CorrespondenceSet":
        return CorrespondenceSet(
            source=self.target, target=self.source,
            frame_i=self.frame_j, frame_j=self.frame_i,
            min_pairs=self.min_pairs,
        )

    def __len__(self):
        return len(self.source)


@dataclass(frozen=True)
class WarpModel:
    """Smooth map from source pixels to target pixels with derivatives."""

    surf_u: SplineSurface
    surf_v: SplineSurface
    smoothing: float
    residual_rms: float

    @property
    def bbox(self):
        return self.surf_u.bbox

    @property
    def grid(self):
        return self.surf_u.grid

    def contains(self, points) -> np.ndarray:
        return self.surf_u.contains(points)

    def __call__(self, points, *, check: bool = True) -> np.ndarray:
        """Warped points, shape like the input."""
        p = np.asarray(points, dtype=float)
        squeeze = p.ndim == 1
        p = np.atleast_2d(p)
        out = np.stack(
            [
                self.surf_u.evaluate(p, check=check),
                self.surf_v.evaluate(p, check=check),
            ],
            axis=-1,
        )
        return out[0] if squeeze else out

    def jacobian(self, points, *, check: bool = True) -> np.ndarray:
        """Warp Jacobians d(target)/d(source), shape (..., 2, 2)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        J = np.empty((len(p), 2, 2))
        J[:, 0, 0] = self.surf_u.evaluate(p, du=1, check=check)
        J[:, 0, 1] = self.surf_u.evaluate(p, dv=1, check=check)
        J[:, 1, 0] = self.surf_v.evaluate(p, du=1, check=check)
        J[:, 1, 1] = self.surf_v.evaluate(p, dv=1, check=check)
        if np.asarray(points).ndim == 1:
            return J[0]
        return J


@dataclass
class WarpJetBatch:
    """Warp quantities at many source pixels, as struct-of-arrays.

    ``jac3`` is the lifted 3x3 Jacobian diag(J, det J); ``djac3`` stacks its
    partials along the two source axes as (N, 2, 3, 3).  ``inv_jac`` holds
    the Jacobian of the independently fitted inverse warp evaluated at the
    warped point; by the inverse function theorem it matches J^-1.
    ``djac3_err``, when present, estimates the per-entry error of ``djac3``
    (fitted warps only); exact providers leave it None.
    """

    source: np.ndarray  # (N, 2)
    point: np.ndarray  # (N, 2) warped points
    jac: np.ndarray  # (N, 2, 2)
    jac3: np.ndarray  # (N, 3, 3)
    djac3: np.ndarray  # (N, 2, 3, 3)
    inv_jac: np.ndarray  # (N, 2, 2)
    djac3_err: np.ndarray | None = None  # (N, 2, 3, 3)

    def __len__(self):
        return len(self.source)

    def __getitem__(self, idx) -> "WarpJetBatch":
        return WarpJetBatch(
            self.source[idx],
            self.point[idx],
            self.jac[idx],
            self.jac3[idx],
            self.djac3[idx],
            self.inv_jac[idx],
            None if self.djac3_err is None else self.djac3_err[idx],
        )


@dataclass(frozen=True)
class WarpJet:
    """Warp quantities at one source pixel."""

    point: np.ndarray
    jac: np.ndarray
    jac3: np.ndarray
    djac3_du: np.ndarray
    djac3_dv: np.ndarray
    inv_jac: np.ndarray


def _quadrature_nodes(knots_u, knots_v):
    nodes, weights = np.polynomial.legendre.leggauss(3)
    su = np.unique(knots_u)
    sv = np.unique(knots_v)
    xs, ws = [], []
    for a, b in zip(su[:-1], su[1:]):
        xs.append(0.5 * (a + b) + 0.5 * (b - a) * nodes)
        ws.append(0.5 * (b - a) * weights)
    xu = np.concatenate(xs)
    wu = np.concatenate(ws)
    xs, ws = [], []
    for a, b in zip(sv[:-1], sv[1:]):
        xs.append(0.5 * (a + b) + 0.5 * (b - a) * nodes)
        ws.append(0.5 * (b - a) * weights)
    xv = np.concatenate(xs)
    wv = np.concatenate(ws)
    uu, vv = np.meshgrid(xu, xv, indexing="ij")
    points = np.column_stack([uu.ravel(), vv.ravel()])
    weight = np.outer(wu, wv).ravel()
    return points, weight


def _homography_defect_penalty(knots_u, knots_v, n_u, n_v, phi, nodes, weight):
    """Quadratic penalty on deviation from local-homography structure.

    A warp is locally a homography exactly when each component's Hessian
    equals the symmetrized product of its gradient with one shared field
    phi.  With phi frozen, the defect is linear in the spline coefficients
    and its Gram matrix acts per channel.
    """
    B_u = _design_rows(knots_u, knots_v, n_u, n_v, nodes, du=1)
    B_v = _design_rows(knots_u, knots_v, n_u, n_v, nodes, dv=1)
    B_uu = _design_rows(knots_u, knots_v, n_u, n_v, nodes, du=2)
    B_uv = _design_rows(knots_u, knots_v, n_u, n_v, nodes, du=1, dv=1)
    B_vv = _design_rows(knots_u, knots_v, n_u, n_v, nodes, dv=2)
    p1 = phi[:, 0][:, None]
    p2 = phi[:, 1][:, None]
    rows = [
        (B_uu - 2.0 * p1 * B_u, 1.0),
        (B_uv - p1 * B_v - p2 * B_u, 2.0),
        (B_vv - 2.0 * p2 * B_v, 1.0),
    ]
    P = np.zeros((n_u * n_v, n_u * n_v))
    for R, mult in rows:
        P += (R * (mult * weight)[:, None]).T @ R
    return P


def _phi_from_fit(coeffs, knots_u, knots_v, n_u, n_v, nodes):
    """Best shared phi field of the local-homography model at the nodes."""
    B_u = _design_rows(knots_u, knots_v, n_u, n_v, nodes, du=1)
    B_v = _design_rows(knots_u, knots_v, n_u, n_v, nodes, dv=1)
    B_uu = _design_rows(knots_u, knots_v, n_u, n_v, nodes, du=2)
    B_uv = _design_rows(knots_u, knots_v, n_u, n_v, nodes, du=1, dv=1)
    B_vv = _design_rows(knots_u, knots_v, n_u, n_v, nodes, dv=2)
    n = len(nodes)
    # per node: rows over channels k and sym entries
    # (uu): 2 phi1 Jku; (uv): phi1 Jkv + phi2 Jku; (vv): 2 phi2 Jkv
    A = np.zeros((n, 2, 2))
    b = np.zeros((n, 2))
    for k in range(2):
        c = coeffs[:, k]
        Ju = B_u @ c
        Jv = B_v @ c
        Huu = B_uu @ c
        Huv = B_uv @ c
        Hvv = B_vv @ c
        # (uu): residual 2 phi1 Ju - Huu
        A[:, 0, 0] += 4.0 * Ju * Ju
        b[:, 0] += 2.0 * Ju * Huu
        # (uv), weight 2: residual phi1 Jv + phi2 Ju - Huv
        A[:, 0, 0] += 2.0 * Jv * Jv
        A[:, 0, 1] += 2.0 * Jv * Ju
        A[:, 1, 0] += 2.0 * Ju * Jv
        A[:, 1, 1] += 2.0 * Ju * Ju
        b[:, 0] += 2.0 * Jv * Huv
        b[:, 1] += 2.0 * Ju * Huv
        # (vv): residual 2 phi2 Jv - Hvv
        A[:, 1, 1] += 4.0 * Jv * Jv
        b[:, 1] += 2.0 * Jv * Hvv
    A += 1e-12 * np.eye(2)
    return np.linalg.solve(A, b[..., None])[..., 0]


def fit_warp(
    correspondences: CorrespondenceSet,
    grid=(8, 8),
    smoothing: float | None = None,
    homography_iters: int = 2,
) -> WarpModel:
    """Fit a smooth warp from matched pixel pairs.

    Minimizes squared target residuals plus ``smoothing`` times a
    second-derivative penalty.  The penalty starts as plain bending energy
    and is then re-shaped ``homography_iters`` times toward the
    local-homography (vanishing 2D Schwarzian) structure, which matches
    warps induced by perspective views of smooth surfaces far better than
    flat bending.  ``homography_iters=0`` keeps the pure bending fit.  The
    default smoothing weight is ``1e-4 * n_pairs``.
    """
    if smoothing is None:
        smoothing = default_smoothing(len(correspondences))
    points = correspondences.source
    targets = correspondences.target
    n_u, n_v = grid
    if n_u < _MIN_GRID or n_v < _MIN_GRID:
        raise DomainError(f"control grid must be at least {_MIN_GRID}x{_MIN_GRID}")
    if smoothing < 0:
        raise DomainError("smoothing weight must be nonnegative")
    bbox = (
        points[:, 0].min(), points[:, 0].max(),
        points[:, 1].min(), points[:, 1].max(),
    )
    u0, u1, v0, v1 = bbox
    if not (u1 > u0 and v1 > v0):
        raise IllPosedFitError("degenerate bounding box: samples are collinear")
    knots_u = _clamped_knots(n_u, u0, u1)
    knots_v = _clamped_knots(n_v, v0, v1)
    design = _design_rows(knots_u, knots_v, n_u, n_v, points)
    penalty = _bending_gram(knots_u, knots_v, n_u, n_v)
    coeffs = _solve_penalized(design, targets, penalty, smoothing)

    if homography_iters > 0:
        nodes, weight = _quadrature_nodes(knots_u, knots_v)
        for _ in range(homography_iters):
            phi = _phi_from_fit(coeffs, knots_u, knots_v, n_u, n_v, nodes)
            penalty = _homography_defect_penalty(
                knots_u, knots_v, n_u, n_v, phi, nodes, weight
            )
            # a whiff of bending keeps the defect nullspace anchored
            penalty = penalty + 1e-4 * _bending_gram(knots_u, knots_v, n_u, n_v)
            coeffs = _solve_penalized(design, targets, penalty, smoothing)

    fitted = design @ coeffs
    rms = float(np.sqrt(np.mean((fitted - targets) ** 2)))
    logger.debug(
        "warp fit %d->%d: %d pairs, grid %s, smoothing %.2e, rms %.3e",
        correspondences.frame_i, correspondences.frame_j,
        len(correspondences), grid, smoothing, rms,
    )
    surf_u = SplineSurface(knots_u, knots_v, coeffs[:, 0].reshape(n_u, n_v), bbox)
    surf_v = SplineSurface(knots_u, knots_v, coeffs[:, 1].reshape(n_u, n_v), bbox)
    return WarpModel(surf_u, surf_v, smoothing, rms)


def fit_scalar_surface(points, values, grid=(8, 8), smoothing: float | None = None):
    """Fit a scalar spline surface z(u, v) to scattered samples."""
    values = np.asarray(values, dtype=float)
    if smoothing is None:
        smoothing = default_smoothing(len(values))
    surfaces, rms = _fit_surfaces(points, values[:, None], grid, smoothing)
    return ScalarSurfaceModel(surfaces[0], rms)


def fit_gradient_surface(
    points, gradients, grid=(8, 8), smoothing: float | None = None, bbox=None
) -> ScalarSurfaceModel:
    """Fit a scalar spline whose gradient matches scattered gradient samples.

    The value level is pinned by a soft zero-mean anchor (the gradient data
    leave an additive constant free); callers fix their preferred gauge from
    the evaluated values.
    """
    points = np.asarray(points, dtype=float)
    gradients = np.asarray(gradients, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or gradients.shape != points.shape:
        raise DomainError("points and gradients must both be (N, 2)")
    if smoothing is None:
        smoothing = default_smoothing(len(points))
    n_u, n_v = grid
    if n_u < _MIN_GRID or n_v < _MIN_GRID:
        raise DomainError(f"control grid must be at least {_MIN_GRID}x{_MIN_GRID}")
    if bbox is None:
        bbox = (
            points[:, 0].min(), points[:, 0].max(),
            points[:, 1].min(), points[:, 1].max(),
        )
    u0, u1, v0, v1 = bbox
    if not (u1 > u0 and v1 > v0):
        raise IllPosedFitError("degenerate bounding box: samples are collinear")
    knots_u = _clamped_knots(n_u, u0, u1)
    knots_v = _clamped_knots(n_v, v0, v1)
    d_u = _design_rows(knots_u, knots_v, n_u, n_v, points, du=1)
    d_v = _design_rows(knots_u, knots_v, n_u, n_v, points, dv=1)
    # anchor: mean of the value rows pinned to zero (soft, unit weight per row)
    d_0 = _design_rows(knots_u, knots_v, n_u, n_v, points)
    anchor = np.mean(d_0, axis=0, keepdims=True)
    design = np.vstack([d_u, d_v, anchor])
    targets = np.concatenate([gradients[:, 0], gradients[:, 1], [0.0]])[:, None]
    penalty = _bending_gram(knots_u, knots_v, n_u, n_v)
    coeffs = _solve_penalized(design, targets, penalty, smoothing)
    fitted = design[:-1] @ coeffs
    rms = float(np.sqrt(np.mean((fitted[:, 0] - targets[:-1, 0]) ** 2)))
    surface = SplineSurface(knots_u, knots_v, coeffs[:, 0].reshape(n_u, n_v), bbox)
    return ScalarSurfaceModel(surface, rms)


def warp_jets(
    model: WarpModel,
    inverse: WarpModel,
    points,
    *,
    check: bool = True,
    det_eps: float = _DET_EPS,
) -> WarpJetBatch:
    """Warp jets at many source pixels.

    With ``check=True``, out-of-domain points raise
    :class:`ExtrapolationError` and folded warps (|det J| < ``det_eps``)
    raise :class:`DegenerateWarpError`.  With ``check=False`` those entries
    are NaN.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(p)

    inside = model.contains(p)
    if check and not np.all(inside):
        raise ExtrapolationError("source point outside warp domain")

    safe = np.where(inside[:, None], p, np.array(model.bbox)[[0, 2]])
    warped = model(safe, check=False)
    jac = model.jacobian(safe, check=False)

    det = np.linalg.det(jac)
    folded = np.abs(det) < det_eps
    if check and np.any(folded & inside):
        raise DegenerateWarpError("warp Jacobian determinant vanishes (fold)")

    inside_inv = inverse.contains(warped)
    if check and not np.all(inside_inv):
        raise ExtrapolationError("warped point outside inverse-warp domain")
    safe_w = np.where(inside_inv[:, None], warped, np.array(inverse.bbox)[[0, 2]])
    inv_jac = inverse.jacobian(safe_w, check=False)

    jac3 = np.zeros((n, 3, 3))
    jac3[:, :2, :2] = jac
    jac3[:, 2, 2] = det

    # second derivatives of the component surfaces give the J3 partials
    djac3 = np.zeros((n, 2, 3, 3))
    d2 = {}
    for name, surf in (("u", model.surf_u), ("v", model.surf_v)):
        d2[name + "_uu"] = surf.evaluate(safe, du=2, check=False)
        d2[name + "_uv"] = surf.evaluate(safe, du=1, dv=1, check=False)
        d2[name + "_vv"] = surf.evaluate(safe, dv=2, check=False)
    # d/du of J = [[u_uu, u_uv], [v_uu, v_uv]]; d/dv likewise
    djac3[:, 0, 0, 0] = d2["u_uu"]
    djac3[:, 0, 0, 1] = d2["u_uv"]
    djac3[:, 0, 1, 0] = d2["v_uu"]
    djac3[:, 0, 1, 1] = d2["v_uv"]
    djac3[:, 1, 0, 0] = d2["u_uv"]
    djac3[:, 1, 0, 1] = d2["u_vv"]
    djac3[:, 1, 1, 0] = d2["v_uv"]
    djac3[:, 1, 1, 1] = d2["v_vv"]
    # d(det J) = d(J00)J11 + J00 d(J11) - d(J01)J10 - J01 d(J10)
    for ax in (0, 1):
        djac3[:, ax, 2, 2] = (
            djac3[:, ax, 0, 0] * jac[:, 1, 1]
            + jac[:, 0, 0] * djac3[:, ax, 1, 1]
            - djac3[:, ax, 0, 1] * jac[:, 1, 0]
            - jac[:, 0, 1] * djac3[:, ax, 1, 0]
        )

    bad = ~inside | folded | ~inside_inv
    if np.any(bad):
        warped[bad] = np.nan
        jac[bad] = np.nan
        jac3[bad] = np.nan
        djac3[bad] = np.nan
        inv_jac[bad] = np.nan

    return WarpJetBatch(
        source=p, point=warped, jac=jac, jac3=jac3, djac3=djac3, inv_jac=inv_jac
    )


def warp_jet(model: WarpModel, inverse: WarpModel, point) -> WarpJet:
    """Warp jet at a single source pixel (checked)."""
    batch = warp_jets(model, inverse, np.asarray(point, dtype=float)[None, :])
    return WarpJet(
        point=batch.point[0],
        jac=batch.jac[0],
        jac3=batch.jac3[0],
        djac3_du=batch.djac3[0, 0],
        djac3_dv=batch.djac3[0, 1],
        inv_jac=batch.inv_jac[0],
    )


def fit_warp_pair(
    correspondences: CorrespondenceSet,
    grid=(8, 8),
    smoothing: float | None = None,
    homography_iters: int = 2,
):
    """Fit forward and (independently) inverse warp models for an edge."""
    forward = fit_warp(
        correspondences, grid=grid, smoothing=smoothing,
        homography_iters=homography_iters,
    )
    backward = fit_warp(
        correspondences.swapped(), grid=grid, smoothing=smoothing,
        homography_iters=homography_iters,
    )
    return forward, backward


def identity_warp_jets(points) -> WarpJetBatch:
    """Exact warp jets of the identity map (static-scene edges)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(p)
    eye2 = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    eye3 = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    return WarpJetBatch(
        source=p, point=p.copy(), jac=eye2, jac3=eye3,
        djac3=np.zeros((n, 2, 3, 3)), inv_jac=eye2.copy(),
    )
