"""Depth recovery from normalized gradient fields, and jet normals.

The first-order jet entries are exactly the gradient of log depth
(y1 = d(ln beta)/du, y2 = d(ln beta)/dv), so per-frame depth is recovered
up to one global scale by fitting a scalar log-depth spline to the sampled
gradients and exponentiating.  The scale gauge pins the mean log depth of
the frame's points to zero.  Non-integrable (noisy) fields are absorbed by
the least squares; no explicit curl correction.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError, DomainError
from .geometry import frame_matrices
from .warps import fit_gradient_surface


def normal_from_jet(p, jet) -> np.ndarray:
    """Unit surface normal from a depth jet: normalized cross product.

    Vectorized: pixels ``(..., 2)`` with jets ``(..., 6)`` give normals
    ``(..., 3)``.  The direction is beta-independent.
    """
    E = frame_matrices(np.asarray(p, dtype=float), np.asarray(jet, dtype=float))
    e3 = E[..., :, 2]
    norm = np.linalg.norm(e3, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateGeometryError("vanishing cross product; normal undefined")
    return e3 / norm


def integrate_log_depth(
    points, gradients, grid=(8, 8), smoothing: float | None = None
):
    """Per-frame depth from sampled log-depth gradients, up to scale.

    Fits a scalar spline L with grad L matching the samples plus a bending
    penalty, then returns ``beta = exp(L - mean(L))``: strictly positive,
    mean log depth exactly zero.
    """
    points = np.asarray(points, dtype=float)
    gradients = np.asarray(gradients, dtype=float)
    if len(points) < 3:
        raise DomainError("need at least 3 points to integrate depth")
    spread = points.max(axis=0) - points.min(axis=0)
    if np.any(spread <= 1e-12):
        raise DomainError("points are collinear; depth field unconstrained")
    model = fit_gradient_surface(points, gradients, grid=grid, smoothing=smoothing)
    log_depth = model(points)
    log_depth = log_depth - log_depth.mean()
    return np.exp(log_depth), model
