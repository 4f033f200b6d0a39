"""Damped least squares with bound projection, single and batched.

The solver steps need many small independent least-squares problems (one
per point or per point-edge).  ``lm_solve_batch`` advances a whole batch in
lockstep with per-problem damping and acceptance, so the result for each
problem is independent of how the batch is partitioned; that is what makes
thread-count-independent, byte-reproducible runs cheap.  Jacobians are
forward finite differences of the batched residual function.

Steps that increase a problem's residual norm are rejected and retried
with stronger damping, so the final norm never exceeds the initial one.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

_FD_EPS = 1e-7
_DAMP_UP = 10.0
_DAMP_DOWN = 0.3
_MAX_RETRY = 8


def _norms(F):
    return np.sqrt(np.einsum("bm,bm->b", F, F))


def _fd_jacobian(fun, X, F0, active):
    """Forward-difference Jacobians, (B, m, n); inactive problems skipped."""
    B, n = X.shape
    m = F0.shape[1]
    J = np.zeros((B, m, n))
    for k in range(n):
        h = _FD_EPS * (1.0 + np.abs(X[:, k]))
        Xp = X.copy()
        Xp[active, k] += h[active]
        Fp = fun(Xp)
        J[active, :, k] = (Fp[active] - F0[active]) / h[active, None]
    return J


def lm_solve_batch(
    fun,
    X0,
    lower=None,
    upper=None,
    max_iter=3,
    damping_init=1e-3,
    gtol=1e-12,
    xtol=1e-14,
):
    """Minimize ``sum(fun(x)^2)`` independently for each row of ``X0``.

    ``fun`` maps (B, n) to (B, m) and must evaluate every row elementwise
    (rows are independent problems).  Bounds are enforced by projecting
    candidate steps.  Non-finite residuals reject the step.  Returns the
    refined (B, n) array; every row's residual norm is <= its initial one.
    """
    X = np.array(X0, dtype=float)
    B, n = X.shape
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    X = np.clip(X, lo, hi)

    F = fun(X)
    if not np.all(np.isfinite(F)):
        raise DomainError("residuals not finite at the initial point")
    cost = _norms(F)
    mu = np.full(B, damping_init)
    active = np.ones(B, dtype=bool)

    for _ in range(max_iter):
        if not np.any(active):
            break
        J = _fd_jacobian(fun, X, F, active)
        JtJ = np.einsum("bmi,bmj->bij", J, J)
        g = np.einsum("bmi,bm->bi", J, F)
        gnorm = np.linalg.norm(g, axis=1)
        active &= gnorm > gtol

        idx = np.arange(n)
        diag = np.maximum(JtJ[:, idx, idx], 1e-12)
        pending = active.copy()
        for _ in range(_MAX_RETRY):
            if not np.any(pending):
                break
            A = JtJ.copy()
            A[:, idx, idx] += mu[:, None] * diag + 1e-14
            try:
                delta = -np.linalg.solve(A[pending], g[pending][..., None])
            except np.linalg.LinAlgError:
                delta = -np.linalg.solve(
                    A[pending] + 1e-8 * np.eye(n), g[pending][..., None]
                )
            delta = delta[..., 0]
            X_trial = X.copy()
            X_trial[pending] += delta
            X_trial = np.clip(X_trial, lo, hi)
            F_trial = fun(X_trial)
            cost_trial = _norms(F_trial)
            cost_trial = np.where(
                np.all(np.isfinite(F_trial), axis=1), cost_trial, np.inf
            )
            improved = pending & (cost_trial < cost)
            step_size = np.linalg.norm(X_trial - X, axis=1)

            X[improved] = X_trial[improved]
            F[improved] = F_trial[improved]
            cost[improved] = cost_trial[improved]
            mu[improved] = np.maximum(mu[improved] * _DAMP_DOWN, 1e-12)
            active[improved & (step_size < xtol)] = False

            rejected = pending & ~improved
            mu[rejected] *= _DAMP_UP
            active[rejected & (mu > 1e10)] = False
            pending = rejected & active
    return X


def nlls_solve(
    fun,
    x0,
    bounds=None,
    max_iter=100,
    damping_init=1e-3,
    gtol=1e-12,
    xtol=1e-14,
):
    """Single-problem damped least squares with box bounds.

    ``fun`` maps an (n,) point to an (m,) residual vector.  Monotone
    acceptance: the returned point's residual norm never exceeds the
    initial one; stagnation returns the best point found.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    lower = upper = None
    if bounds is not None:
        lower, upper = bounds

    def batched(X):
        return np.atleast_2d(np.asarray(fun(X[0]), dtype=float))

    out = lm_solve_batch(
        batched,
        x0[None, :],
        lower=lower,
        upper=upper,
        max_iter=max_iter,
        damping_init=damping_init,
        gtol=gtol,
        xtol=xtol,
    )
    return out[0]
