"""Tests for alignment and error metrics."""

import numpy as np
import pytest

from connrsfm.errors import DomainError
from connrsfm.evaluation import (
    absor_align,
    percent_3d_error,
    shape_error,
)
from connrsfm.synthetic import random_rotation


def random_cloud(rng, n=50):
    return rng.normal(size=(n, 3))


class TestAbsorAlign:
    def test_identity(self):
        rng = np.random.default_rng(0)
        p = random_cloud(rng)
        a = absor_align(p, p)
        assert np.allclose(a.rotation, np.eye(3), atol=1e-12)
        assert a.scale == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(a.translation, 0.0, atol=1e-12)

    def test_constructed_transform_recovery(self):
        # oracle: build gt = 2 R0 p + t0 and demand exact recovery
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = random_cloud(rng)
            R0 = random_rotation(rng)
            t0 = rng.normal(size=3)
            g = 2.0 * p @ R0.T + t0
            a = absor_align(p, g)
            assert np.allclose(a.rotation, R0, atol=1e-9)
            assert a.scale == pytest.approx(2.0, abs=1e-9)
            assert np.allclose(a.translation, t0, atol=1e-9)

    def test_reflection_case_returns_proper_rotation(self):
        rng = np.random.default_rng(2)
        p = random_cloud(rng)
        g = p.copy()
        g[:, 2] = -g[:, 2]  # a reflection, not achievable by rotation
        a = absor_align(p, g)
        assert np.linalg.det(a.rotation) == pytest.approx(1.0, abs=1e-9)
        assert a.objective(p, g) > 0

    def test_beats_random_transforms(self):
        rng = np.random.default_rng(3)
        p = random_cloud(rng)
        g = 1.5 * p @ random_rotation(rng).T + rng.normal(size=3)
        g += 0.01 * rng.normal(size=g.shape)
        a = absor_align(p, g)
        best = a.objective(p, g)
        from connrsfm.evaluation import Alignment

        for _ in range(64):
            cand = Alignment(
                rotation=random_rotation(rng),
                scale=float(rng.uniform(0.5, 2.5)),
                translation=rng.normal(size=3),
            )
            assert best <= cand.objective(p, g) + 1e-9

    def test_degenerate_rejected(self):
        t = np.linspace(0, 1, 10)
        line = np.column_stack([t, 2 * t, -t])
        with pytest.raises(DomainError):
            absor_align(line, line)


class TestPercent3DError:
    def test_exact_is_zero(self):
        rng = np.random.default_rng(4)
        p = random_cloud(rng)
        assert percent_3d_error(p, p) == pytest.approx(0.0, abs=1e-10)

    def test_known_perturbation_magnitude(self):
        # a perturbation of 1% of the scene spread reads back as about 1%
        rng = np.random.default_rng(5)
        g = random_cloud(rng, 200)
        spread = np.mean(np.linalg.norm(g - g.mean(axis=0), axis=1))
        noise = rng.normal(size=g.shape)
        noise *= 0.01 * spread / np.sqrt(np.mean(np.sum(noise**2, axis=1)))
        p = g + noise
        err = percent_3d_error(p, g)
        assert err == pytest.approx(1.0, rel=0.15)

    def test_similarity_invariance(self):
        rng = np.random.default_rng(6)
        g = random_cloud(rng)
        p = g + 0.01 * rng.normal(size=g.shape)
        base = percent_3d_error(p, g)
        q = 3.0 * p @ random_rotation(rng).T + np.array([5.0, -2.0, 1.0])
        assert percent_3d_error(q, g) == pytest.approx(base, abs=1e-9)


class TestShapeError:
    def unit(self, rng, n):
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def test_identical_zero(self):
        rng = np.random.default_rng(7)
        n = self.unit(rng, 30)
        assert shape_error(n, n) == pytest.approx(0.0, abs=1e-5)

    def test_flip_agnostic(self):
        rng = np.random.default_rng(8)
        n = self.unit(rng, 30)
        signs = rng.choice([-1.0, 1.0], size=(30, 1))
        assert shape_error(n * signs, n) == pytest.approx(0.0, abs=1e-5)

    def test_five_degree_tilt(self):
        # oracle: rotate every normal by exactly 5 degrees about an
        # orthogonal axis
        rng = np.random.default_rng(9)
        n = self.unit(rng, 40)
        angle = np.radians(5.0)
        tilted = np.empty_like(n)
        for i, v in enumerate(n):
            axis = np.cross(v, rng.normal(size=3))
            axis /= np.linalg.norm(axis)
            tilted[i] = (
                np.cos(angle) * v + np.sin(angle) * np.cross(axis, v)
            )
        assert shape_error(tilted, n) == pytest.approx(5.0, abs=1e-6)

    def test_non_unit_renormalized(self):
        rng = np.random.default_rng(10)
        n = self.unit(rng, 10)
        assert shape_error(3.0 * n, n) == pytest.approx(0.0, abs=1e-5)
