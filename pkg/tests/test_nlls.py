"""Tests for the damped least-squares solver."""

import numpy as np
import pytest

from connrsfm.errors import DomainError
from connrsfm.nlls import lm_solve_batch, nlls_solve


class TestSingle:
    def test_linear_one_step(self):
        x = nlls_solve(lambda x: x - 3.0, np.array([0.0]), max_iter=5)
        assert np.allclose(x, 3.0, atol=1e-10)

    def test_rosenbrock(self):
        # standard test function as residual pair (10(y-x^2), 1-x)
        def resid(x):
            return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

        x = nlls_solve(resid, np.array([-1.2, 1.0]), max_iter=200)
        assert np.linalg.norm(resid(x)) < 1e-6
        assert np.allclose(x, [1.0, 1.0], atol=1e-6)

    def test_bound_active(self):
        # minimize (x+1)^2 subject to x >= 0
        x = nlls_solve(
            lambda x: x + 1.0,
            np.array([2.0]),
            bounds=(np.array([0.0]), np.array([np.inf])),
            max_iter=50,
        )
        assert x[0] == pytest.approx(0.0, abs=1e-12)

    def test_nonfinite_start_rejected(self):
        with pytest.raises(DomainError):
            nlls_solve(lambda x: np.array([np.nan]), np.array([1.0]))

    def test_monotone_norm(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(6, 3))
        b = rng.normal(size=6)

        def resid(x):
            return A @ x - b + 0.1 * np.sin(x).sum()

        x0 = rng.normal(size=3)
        x = nlls_solve(resid, x0, max_iter=3)
        assert np.linalg.norm(resid(x)) <= np.linalg.norm(resid(x0)) + 1e-12


class TestBatch:
    def test_independent_problems(self):
        # each row solves (x - t_b)^2 for a different target
        targets = np.array([1.0, -2.0, 5.0, 0.3])

        def fun(X):
            return X - targets[:, None]

        out = lm_solve_batch(fun, np.zeros((4, 1)), max_iter=5)
        assert np.allclose(out[:, 0], targets, atol=1e-10)

    def test_partition_independence(self):
        # solving a batch must give the same answer as solving per-problem
        rng = np.random.default_rng(1)
        targets = rng.normal(size=(8, 2))

        def make_fun(t):
            def fun(X):
                r1 = X[:, :1] ** 2 - t[:, :1]
                r2 = X[:, 1:] - np.sin(X[:, :1]) - t[:, 1:]
                return np.concatenate([r1, r2], axis=1)

            return fun

        full = lm_solve_batch(
            make_fun(targets), np.full((8, 2), 0.5), max_iter=20
        )
        halves = [
            lm_solve_batch(
                make_fun(targets[i : i + 4]), np.full((4, 2), 0.5), max_iter=20
            )
            for i in (0, 4)
        ]
        assert np.array_equal(full, np.vstack(halves))

    def test_cap_respected_and_monotone(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(5, 4, 3))
        b = rng.normal(size=(5, 4))

        def fun(X):
            out = np.einsum("bmi,bi->bm", A, X) - b
            return out + 0.05 * X[:, :1] ** 3

        X0 = rng.normal(size=(5, 3))
        before = np.linalg.norm(fun(X0), axis=1)
        out = lm_solve_batch(fun, X0, max_iter=3)
        after = np.linalg.norm(fun(out), axis=1)
        assert np.all(after <= before + 1e-12)

    def test_bounds_projected(self):
        def fun(X):
            return X + 2.0

        out = lm_solve_batch(
            fun, np.ones((3, 2)), lower=np.zeros(2), upper=np.full(2, 10.0),
            max_iter=10,
        )
        assert np.allclose(out, 0.0)

    def test_nonfinite_candidate_rejected(self):
        # residual turns NaN beyond x=2; solver must stay at a finite point
        def fun(X):
            out = X - 10.0
            out[X[:, 0] > 2.0] = np.nan
            return out

        out = lm_solve_batch(fun, np.zeros((1, 1)), max_iter=10)
        assert np.all(np.isfinite(fun(out)))
        assert out[0, 0] <= 2.0
