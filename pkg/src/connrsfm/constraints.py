"""Residual equations linking matched surface points across two frames.

For an edge whose warp maps source pixels to target pixels, a conformal
deformation of scale ``lam`` (mapping the target surface onto the source)
must satisfy two families of equations at every matched point:

* metric preservation: the source first fundamental form equals lam^2
  times the warp-pulled-back target form (3 independent entries);
* connection invariance: for each source pixel axis, the lifted warp
  Jacobian conjugates the source connection block (scaled by
  diag(lam, lam, lam^2)) onto a combination of target connection blocks
  plus the derivative of the lifted Jacobian (two 3x3 identities,
  18 entries).

Both families are rotation invariant.  Within each 3x3 identity the
upper-left 2x2 block and the (3,3) entry do not involve lam at all; the
remaining four entries are linear in lam and give a closed-form scale
estimate (eight terms over both identities).

All functions are batched over matched points.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateScaleError, DomainError
from .geometry import connection_matrices, frame_matrices

# Flat indices (row-major within each 3x3 identity) of entries free of and
# sensitive to the conformal scale.
_FREE_IN_BLOCK = (0, 1, 3, 4, 8)
_SENS_IN_BLOCK = (2, 5, 6, 7)
LAMBDA_FREE_CONNECTION_IDX = tuple(
    list(_FREE_IN_BLOCK) + [9 + i for i in _FREE_IN_BLOCK]
)
LAMBDA_SENSITIVE_CONNECTION_IDX = tuple(
    list(_SENS_IN_BLOCK) + [9 + i for i in _SENS_IN_BLOCK]
)
# Positions within the 21-residual block (3 metric + 18 connection).
BLOCK_SIZE = 21
LAMBDA_SENSITIVE_BLOCK_IDX = tuple(
    [0, 1, 2] + [3 + i for i in LAMBDA_SENSITIVE_CONNECTION_IDX]
)
DENOM_TOL = 1e-10

_TRIU = ((0, 0), (0, 1), (1, 1))


def _as_lambda_array(lam, n):
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        lam = np.full(n, float(lam))
    return lam


def _lambda_ratio_matrix(lam):
    """S[i, j] = d_i / d_j for d = (lam, lam, lam^2); conjugation weights."""
    d = np.stack([lam, lam, lam * lam], axis=-1)
    return d[..., :, None] / d[..., None, :]


def metric_sides(src_pixels, src_jets, dst_pixels, dst_jets, wjb):
    """First fundamental forms: source G1 and warp-pulled-back target W."""
    Es = frame_matrices(src_pixels, src_jets)[..., :, :2]
    Ed = frame_matrices(dst_pixels, dst_jets)[..., :, :2]
    G1 = np.einsum("...ki,...kj->...ij", Es, Es)
    G2 = np.einsum("...ki,...kj->...ij", Ed, Ed)
    W = np.einsum("...ki,...kl,...lj->...ij", wjb.jac, G2, wjb.jac)
    return G1, W


def metric_residuals(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam):
    """Upper-triangle entries of G1 - lam^2 W, shape (N, 3)."""
    G1, W = metric_sides(src_pixels, src_jets, dst_pixels, dst_jets, wjb)
    lam = _as_lambda_array(lam, len(G1))
    diff = G1 - (lam * lam)[..., None, None] * W
    return np.stack([diff[..., i, j] for i, j in _TRIU], axis=-1)


def connection_sides(
    src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam, *, check=False
):
    """Both sides of the two connection identities, each (N, 2, 3, 3).

    Left: J3 . (Lam Gamma_src_k Lam^-1).  Right: (Gamma_dst_1 J[0,k] +
    Gamma_dst_2 J[1,k]) . J3 + dJ3/d(source axis k).  Exactly equal on
    conformal data with the true scale.
    """
    g_src = connection_matrices(src_pixels, src_jets, check=check)
    g_dst = connection_matrices(dst_pixels, dst_jets, check=check)
    n = g_src.shape[0]
    lam = _as_lambda_array(lam, n)
    ratio = _lambda_ratio_matrix(lam)

    lhs = np.empty((n, 2, 3, 3))
    rhs = np.empty((n, 2, 3, 3))
    gd = (g_dst[:, :, 0:3], g_dst[:, :, 3:6])
    for k in (0, 1):
        gs_k = g_src[:, :, 3 * k : 3 * k + 3]
        conj = gs_k * ratio
        lhs[:, k] = np.einsum("nij,njk->nik", wjb.jac3, conj)
        comb = (
            gd[0] * wjb.jac[:, 0, k][:, None, None]
            + gd[1] * wjb.jac[:, 1, k][:, None, None]
        )
        rhs[:, k] = np.einsum("nij,njk->nik", comb, wjb.jac3) + wjb.djac3[:, k]
    return lhs, rhs


def connection_residuals(
    src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam, *, check=False
):
    """Flattened difference of both connection identities, shape (N, 18)."""
    lhs, rhs = connection_sides(
        src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam, check=check
    )
    return (lhs - rhs).reshape(len(lhs), 18)


def corollary1_invariants(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam=1.0):
    """The ten connection residual entries that are independent of lam.

    The returned values are bitwise identical for any positive lam
    argument: the conjugation weights reduce to exact ones on these
    entries.
    """
    res = connection_residuals(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam)
    return res[:, list(LAMBDA_FREE_CONNECTION_IDX)]


def residual_block(
    src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam, omega, *, scales=None
):
    """Full 21-entry weighted residual blocks, shape (N, 21).

    Metric entries first, then the 18 connection entries, each multiplied
    by sqrt(omega).  ``scales`` (N, 21), when given, divides entrywise
    before weighting.
    """
    met = metric_residuals(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam)
    con = connection_residuals(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam)
    block = np.concatenate([met, con], axis=-1)
    if scales is not None:
        block = block / scales
    w = np.sqrt(np.asarray(omega, dtype=float))
    return block * np.atleast_1d(w)[..., None]


# Structural groups of the 21 residual entries sharing one magnitude scale:
# metric; then per identity the 2x2 block, the (1:2,3) column, the (3,1:2)
# row and the (3,3) corner.
_SCALE_GROUPS = (
    tuple(range(0, 3)),
    (3 + 0, 3 + 1, 3 + 3, 3 + 4),
    (3 + 2, 3 + 5),
    (3 + 6, 3 + 7),
    (3 + 8,),
    (12 + 0, 12 + 1, 12 + 3, 12 + 4),
    (12 + 2, 12 + 5),
    (12 + 6, 12 + 7),
    (12 + 8,),
)


def residual_scales(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam):
    """Per-entry magnitude scales of the residual equations, shape (N, 21).

    Each structural group of entries is normalized by the RMS magnitude of
    its equation sides at the current state plus a small floor, so entries
    of heterogeneous units weigh comparably in the least squares.  Both
    sides enter the RMS: at a flat initial state the left-hand connection
    side is identically zero and alone would degenerate the scale.
    """
    G1, W = metric_sides(src_pixels, src_jets, dst_pixels, dst_jets, wjb)
    lhs, rhs = connection_sides(src_pixels, src_jets, dst_pixels, dst_jets, wjb, lam)
    lam = _as_lambda_array(lam, len(G1))
    n = len(G1)
    Wl = (lam * lam)[:, None, None] * W
    raw = np.concatenate(
        [
            np.stack([G1[..., i, j] for i, j in _TRIU], axis=-1),
            lhs.reshape(n, 18),
        ],
        axis=-1,
    )
    raw2 = np.concatenate(
        [
            np.stack([Wl[..., i, j] for i, j in _TRIU], axis=-1),
            rhs.reshape(n, 18),
        ],
        axis=-1,
    )
    overall = np.sqrt(0.5 * np.mean(raw**2 + raw2**2, axis=1))
    scales = np.empty((n, BLOCK_SIZE))
    for group in _SCALE_GROUPS:
        g = list(group)
        rms = np.sqrt(0.5 * np.mean(raw[:, g] ** 2 + raw2[:, g] ** 2, axis=1))
        # floor each group by a share of the overall magnitude: groups whose
        # sides momentarily vanish must not get unbounded weight
        scales[:, g] = (rms + 0.05 * overall + 1e-6)[:, None]
    return scales


def _connection_t_blocks(gamma):
    """Sub-blocks of both 3x3 connection blocks: (T12 (N,2,2,), T21 (N,2,2)).

    ``T12[:, k]`` is the (1:2, 3) column of block k; ``T21[:, k]`` the
    (3, 1:2) row of block k.
    """
    blocks = np.stack([gamma[:, :, 0:3], gamma[:, :, 3:6]], axis=1)
    t12 = blocks[:, :, 0:2, 2]
    t21 = blocks[:, :, 2, 0:2]
    return t12, t21


def closed_form_lambda_terms(src_pixels, src_jets, dst_pixels, dst_jets, wjb):
    """The eight linear-in-lam estimates and their validity mask.

    Each lam-sensitive connection entry is linear in the scale; solving
    each for lam gives eight per-point estimates whose plain average is the
    closed-form least-squares solution.  Terms with near-zero denominators
    are flagged invalid.
    """
    g_src = connection_matrices(src_pixels, src_jets, check=False)
    g_dst = connection_matrices(dst_pixels, dst_jets, check=False)
    t12_s, t21_s = _connection_t_blocks(g_src)
    t12_d, t21_d = _connection_t_blocks(g_dst)
    J = wjb.jac
    det = np.linalg.det(J)

    n = len(g_src)
    terms = np.full((n, 8), np.nan)
    denoms = np.full((n, 8), 0.0)
    col = 0
    for k in (0, 1):
        a = J[:, 0, k][:, None]
        b = J[:, 1, k][:, None]
        # row-type: lam * det * T21_src_k = (a T21_dst_1 + b T21_dst_2) J
        comb_row = a * t21_d[:, 0] + b * t21_d[:, 1]
        num_row = np.einsum("ni,nij->nj", comb_row, J)
        den_row = det[:, None] * t21_s[:, k]
        # col-type: J T12_src_k = lam * det * (a T12_dst_1 + b T12_dst_2)
        comb_col = a * t12_d[:, 0] + b * t12_d[:, 1]
        num_col = np.einsum("nij,nj->ni", J, t12_s[:, k])
        den_col = det[:, None] * comb_col
        for j in (0, 1):
            terms[:, col] = num_row[:, j] / den_row[:, j]
            denoms[:, col] = den_row[:, j]
            col += 1
        for j in (0, 1):
            terms[:, col] = num_col[:, j] / den_col[:, j]
            denoms[:, col] = den_col[:, j]
            col += 1
    valid = (np.abs(denoms) >= DENOM_TOL) & np.isfinite(terms)
    return terms, valid


def closed_form_lambda(
    src_pixels, src_jets, dst_pixels, dst_jets, wjb, *, reduce=True
):
    """Closed-form conformal scale from the connection relations.

    Averages the surviving terms of the eight-term solution; terms with
    degenerate denominators are dropped.  With ``reduce=True`` and a single
    point, raises :class:`DegenerateScaleError` when nothing survives;
    batched output marks such points NaN.
    """
    terms, valid = closed_form_lambda_terms(
        src_pixels, src_jets, dst_pixels, dst_jets, wjb
    )
    count = valid.sum(axis=1)
    safe = np.where(valid, terms, 0.0)
    lam = np.where(count > 0, safe.sum(axis=1) / np.maximum(count, 1), np.nan)
    if reduce and lam.shape == (1,):
        if count[0] == 0:
            raise DegenerateScaleError(
                "all eight conformal-scale denominators vanish"
            )
        return float(lam[0])
    return lam


def metric_lambda_estimates(src_pixels, src_jets, dst_pixels, dst_jets, wjb):
    """Square-rooted entry ratios of the metric equation, (N, 3) + mask.

    Only positive ratios with non-vanishing denominators yield estimates;
    the scale is positive by definition.
    """
    G1, W = metric_sides(src_pixels, src_jets, dst_pixels, dst_jets, wjb)
    g = np.stack([G1[..., i, j] for i, j in _TRIU], axis=-1)
    w = np.stack([W[..., i, j] for i, j in _TRIU], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = g / w
    valid = (np.abs(w) >= DENOM_TOL) & (ratio > 0)
    est = np.where(valid, np.sqrt(np.abs(ratio)), np.nan)
    return est, valid


def prestep_lambda(src_pixels, src_jets, dst_pixels, dst_jets, wjb, *, reduce=True):
    """Initialization-grade scale: average of eleven independent estimates.

    Three square-rooted metric entry ratios plus the eight closed-form
    connection terms; degenerate members are dropped from the average, and
    the result is clamped positive.
    """
    m_est, m_valid = metric_lambda_estimates(
        src_pixels, src_jets, dst_pixels, dst_jets, wjb
    )
    c_terms, c_valid = closed_form_lambda_terms(
        src_pixels, src_jets, dst_pixels, dst_jets, wjb
    )
    est = np.concatenate([m_est, c_terms], axis=1)
    valid = np.concatenate([m_valid, c_valid], axis=1)
    count = valid.sum(axis=1)
    safe = np.where(valid, est, 0.0)
    lam = np.where(count > 0, safe.sum(axis=1) / np.maximum(count, 1), np.nan)
    lam = np.where(np.isfinite(lam) & (lam > 0), lam, np.nan)
    if reduce and lam.shape == (1,):
        if not np.isfinite(lam[0]):
            raise DegenerateScaleError("all eleven scale estimates degenerate")
        return float(lam[0])
    return lam


def relative_residual(lhs, rhs, axis=None):
    """Scale-free residual size: |L - R| over the larger side magnitude."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    num = np.linalg.norm(lhs - rhs, axis=axis) if axis is not None else np.abs(
        lhs - rhs
    )
    if axis is not None:
        den = np.maximum(
            np.linalg.norm(lhs, axis=axis), np.linalg.norm(rhs, axis=axis)
        )
    else:
        den = np.maximum(np.abs(lhs), np.abs(rhs))
    return num / np.maximum(den, 1e-12)
