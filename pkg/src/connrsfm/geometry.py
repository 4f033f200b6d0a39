"""Perspective projection, image embedding, moving frames and connections.

All pixel coordinates are calibration-normalized retinal coordinates; any
intrinsic calibration is applied at ingestion, never here.  A surface seen
from the camera is parameterized by its depth field ``beta(u, v)`` through
the embedding ``beta * (u, v, 1)``.  Per-point unknowns are packed as depth
jets: the depth plus its normalized first and second derivatives.

Everything here is a pure function; array arguments broadcast over leading
batch dimensions with pixels as ``(..., 2)`` and jets as ``(..., 6)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, DomainError

# Jet component order used throughout the package.
JET_FIELDS = ("beta", "y1", "y2", "y11", "y12", "y22")

# Reject the frame-matrix inversion above this condition number; the
# connection is dominated by it and becomes numerically meaningless.
COND_LIMIT = 1e10


@dataclass(frozen=True)
class PixelPoint:
    """Retinal image point (dimensionless, calibration-normalized)."""

    u: float
    v: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise DomainError("pixel coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class DepthJet:
    """Depth plus normalized first/second derivatives at one pixel.

    ``y1 = (d beta/du)/beta`` and ``y2`` likewise in v; the second-order
    entries are the raw second derivatives of beta divided by beta, e.g.
    ``y11 = (d^2 beta/du^2)/beta``.  ``y12`` stands for both mixed partials.
    """

    beta: float
    y1: float
    y2: float
    y11: float = 0.0
    y12: float = 0.0
    y22: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise DomainError("depth jet entries must be finite")
        if self.beta <= 0.0:
            raise DomainError(f"depth must be positive, got {self.beta}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.beta, self.y1, self.y2, self.y11, self.y12, self.y22],
            dtype=float,
        )

    @classmethod
    def from_array(cls, arr) -> "DepthJet":
        b, y1, y2, y11, y12, y22 = np.asarray(arr, dtype=float)
        return cls(b, y1, y2, y11, y12, y22)


@dataclass(frozen=True)
class MovingFrame:
    """Local surface basis: two tangent vectors and their cross product."""

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        """3x3 matrix with columns (e1, e2, e3)."""
        return np.stack([self.e1, self.e2, self.e3], axis=-1)


@dataclass(frozen=True)
class ConnectionMatrix:
    """Connection coefficients as a 3x6 matrix of two adjacent 3x3 blocks.

    Column ``3*(k) + (j)`` holds the coefficients expressing the derivative
    of frame vector ``e_{j+1}`` along pixel axis ``k`` (0 = u, 1 = v) in the
    frame basis.
    """

    gamma: np.ndarray

    def block(self, axis: int) -> np.ndarray:
        """3x3 block for derivatives along ``axis`` (0 = u, 1 = v)."""
        if axis not in (0, 1):
            raise ValueError("axis must be 0 or 1")
        return self.gamma[:, 3 * axis : 3 * axis + 3]


def project(z) -> np.ndarray:
    """Perspective projection of 3D points ``(..., 3)`` with positive depth."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 3:
        raise ValueError("expected (..., 3) array")
    depth = z[..., 2]
    if np.any(depth <= 0.0):
        raise DomainError("cannot project points with non-positive depth")
    return z[..., :2] / depth[..., None]


def embed(p, beta) -> np.ndarray:
    """Back-project pixels ``(..., 2)`` at depth ``beta`` to 3D points."""
    p = np.asarray(p, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0.0):
        raise DomainError("depth must be positive")
    ones = np.ones(p.shape[:-1] + (1,))
    return beta[..., None] * np.concatenate([p, ones], axis=-1)


def frame_matrices(p, jets) -> np.ndarray:
    """Moving-frame matrices ``(..., 3, 3)`` with columns (e1, e2, e3).

    e1 = beta*(y1*u + 1, y1*v, y1), e2 = beta*(y2*u, y2*v + 1, y2) and
    e3 = beta^2*(-y1, -y2, y1*u + y2*v + 1) = e1 x e2.
    """
    p = np.asarray(p, dtype=float)
    jets = np.asarray(jets, dtype=float)
    u, v = p[..., 0], p[..., 1]
    beta, y1, y2 = jets[..., 0], jets[..., 1], jets[..., 2]

    out = np.empty(p.shape[:-1] + (3, 3))
    out[..., 0, 0] = beta * (y1 * u + 1.0)
    out[..., 1, 0] = beta * y1 * v
    out[..., 2, 0] = beta * y1
    out[..., 0, 1] = beta * y2 * u
    out[..., 1, 1] = beta * (y2 * v + 1.0)
    out[..., 2, 1] = beta * y2
    b2 = beta * beta
    out[..., 0, 2] = -b2 * y1
    out[..., 1, 2] = -b2 * y2
    out[..., 2, 2] = b2 * (y1 * u + y2 * v + 1.0)
    return out


def frame_derivatives(p, jets) -> np.ndarray:
    """Analytic pixel derivatives of the frame columns, shape ``(..., 3, 6)``.

    Columns 0..2 are d(e1)/du, d(e2)/du, d(e3)/du; columns 3..5 the same
    along v.  Uses the raw-derivative relations beta_1 = beta*y1,
    beta_11 = beta*y11, etc.
    """
    p = np.asarray(p, dtype=float)
    jets = np.asarray(jets, dtype=float)
    u, v = p[..., 0], p[..., 1]
    beta = jets[..., 0]
    b1 = beta * jets[..., 1]
    b2 = beta * jets[..., 2]
    b11 = beta * jets[..., 3]
    b12 = beta * jets[..., 4]
    b22 = beta * jets[..., 5]

    out = np.empty(p.shape[:-1] + (3, 6))
    # d(e1)/du
    out[..., 0, 0] = b11 * u + 2.0 * b1
    out[..., 1, 0] = b11 * v
    out[..., 2, 0] = b11
    # d(e2)/du = d(e1)/dv (mixed second derivative of the embedding)
    out[..., 0, 1] = b12 * u + b2
    out[..., 1, 1] = b12 * v + b1
    out[..., 2, 1] = b12
    # d(e3)/du
    out[..., 0, 2] = -b1 * b1 - beta * b11
    out[..., 1, 2] = -b1 * b2 - beta * b12
    out[..., 2, 2] = (
        3.0 * beta * b1 + u * b1 * b1 + u * beta * b11 + v * beta * b12 + v * b1 * b2
    )
    # d(e1)/dv
    out[..., :, 3] = out[..., :, 1]
    # d(e2)/dv
    out[..., 0, 4] = b22 * u
    out[..., 1, 4] = b22 * v + 2.0 * b2
    out[..., 2, 4] = b22
    # d(e3)/dv
    out[..., 0, 5] = -beta * b12 - b1 * b2
    out[..., 1, 5] = -beta * b22 - b2 * b2
    out[..., 2, 5] = (
        u * b2 * b1 + u * beta * b12 + 3.0 * beta * b2 + v * b2 * b2 + v * beta * b22
    )
    return out


def connection_matrices(
    p, jets, *, check: bool = True, cond_limit: float = COND_LIMIT
) -> np.ndarray:
    """Connection matrices ``(..., 3, 6)`` from pixel position and depth jet.

    Solves E * Gamma = B where E is the frame matrix and B holds the analytic
    frame derivatives, so Gamma reproduces d(e_j)/d(u or v) in the frame
    basis.

    With ``check=True`` a (near-)singular frame raises
    :class:`DegenerateGeometryError`.  With ``check=False`` degenerate
    entries come back as NaN so batched optimization loops can mask them.
    """
    E = frame_matrices(p, jets)
    B = frame_derivatives(p, jets)

    if check:
        cond = np.linalg.cond(E)
        if np.any(~np.isfinite(cond)) or np.any(cond > cond_limit):
            raise DegenerateGeometryError(
                f"frame matrix condition number exceeds {cond_limit:g}"
            )
        return np.linalg.solve(E, B)

    det = np.linalg.det(E)
    bad = ~np.isfinite(det) | (np.abs(det) < 1e-300)
    if not np.any(bad):
        return np.linalg.solve(E, B)
    E = E.copy()
    E[bad] = np.eye(3)
    gamma = np.linalg.solve(E, B)
    gamma[bad] = np.nan
    return gamma


def moving_frame(p: PixelPoint, jet: DepthJet) -> MovingFrame:
    """Moving frame at a single pixel."""
    E = frame_matrices(p.as_array(), jet.as_array())
    return MovingFrame(e1=E[:, 0], e2=E[:, 1], e3=E[:, 2])


def connection(
    p: PixelPoint, jet: DepthJet, *, cond_limit: float = COND_LIMIT
) -> ConnectionMatrix:
    """Connection matrix at a single pixel; raises on degenerate geometry."""
    gamma = connection_matrices(
        p.as_array(), jet.as_array(), check=True, cond_limit=cond_limit
    )
    return ConnectionMatrix(gamma=gamma)
