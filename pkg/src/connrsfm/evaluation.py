"""Alignment and error metrics against ground truth.

Reconstructions are compared per frame after a closed-form similarity
alignment (optimal rotation, scale and translation in the least-squares
sense).  The position metric is an RMSE percentage of the scene spread;
the shape metric is the mean angle between unit normals, sign-agnostic
since normal orientation is a convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class Alignment:
    """Similarity transform p -> scale * rotation @ p + translation."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rotation.T) + self.translation

    def objective(self, recon, gt) -> float:
        d = self.apply(recon) - np.asarray(gt, dtype=float)
        return float(np.sum(d * d))


def absor_align(recon, gt) -> Alignment:
    """Closed-form absolute orientation (Umeyama's solution).

    Returns the similarity transform minimizing sum ||s R p + t - g||^2
    with a proper rotation (det = +1) enforced.
    """
    p = np.asarray(recon, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise DomainError("point lists must both be (N, 3)")
    n = len(p)
    if n < 3:
        raise DomainError("need at least 3 point pairs")

    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    pc = p - mu_p
    gc = g - mu_g
    var_p = np.sum(pc * pc) / n
    cov = gc.T @ pc / n
    if np.linalg.matrix_rank(cov) < 2 or var_p < 1e-24:
        raise DomainError("degenerate configuration: points nearly collinear")

    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_p)
    if scale <= 0:
        raise DomainError("degenerate configuration: nonpositive scale")
    t = mu_g - scale * (R @ mu_p)
    return Alignment(rotation=R, scale=scale, translation=t)


def percent_3d_error(recon, gt) -> float:
    """Aligned RMSE as a percentage of the scene spread for one frame.

    The normalizer is the mean distance of ground-truth points from their
    centroid, which makes the percentage similarity-invariant.
    """
    g = np.asarray(gt, dtype=float)
    align = absor_align(recon, gt)
    rmse = np.sqrt(np.mean(np.sum((align.apply(recon) - g) ** 2, axis=1)))
    spread = np.mean(np.linalg.norm(g - g.mean(axis=0), axis=1))
    if spread <= 0:
        raise DomainError("ground truth points are coincident")
    return float(100.0 * rmse / spread)


def percent_3d_error_frames(recon_frames, gt_frames):
    """Per-frame and mean position error over a sequence.

    Frames are (points, 3) arrays; pairs are aligned independently.
    """
    per_frame = [percent_3d_error(r, g) for r, g in zip(recon_frames, gt_frames)]
    return per_frame, float(np.mean(per_frame))


def shape_error(normals_recon, normals_gt) -> float:
    """Mean angular error between unit normal fields, in degrees.

    Sign-agnostic; non-unit inputs are renormalized.
    """
    nr = np.atleast_2d(np.asarray(normals_recon, dtype=float))
    ng = np.atleast_2d(np.asarray(normals_gt, dtype=float))
    if nr.shape != ng.shape:
        raise DomainError("normal lists must have equal shapes")

    def unit(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            import logging

            logging.getLogger(__name__).warning(
                "non-unit normals supplied; renormalizing"
            )
        return x / np.maximum(norms, 1e-300)

    dots = np.abs(np.einsum("ni,ni->n", unit(nr), unit(ng)))
    angles = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    return float(np.mean(angles))


def shape_error_frames(normals_recon_frames, normals_gt_frames):
    per_frame = [
        shape_error(r, g)
        for r, g in zip(normals_recon_frames, normals_gt_frames)
    ]
    return per_frame, float(np.mean(per_frame))
