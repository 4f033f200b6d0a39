"""Tests for the spline warp engine."""

import numpy as np
import pytest

from connrsfm.errors import (
    DegenerateWarpError,
    DomainError,
    ExtrapolationError,
    IllPosedFitError,
)
from connrsfm.warps import (
    CorrespondenceSet,
    fit_gradient_surface,
    fit_scalar_surface,
    fit_warp,
    fit_warp_pair,
    warp_jet,
    warp_jets,
)


def lattice(n=5, lo=-0.5, hi=0.5):
    g = np.linspace(lo, hi, n)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()])


def interior_points(rng, n, lo=-0.3, hi=0.3):
    return rng.uniform(lo, hi, size=(n, 2))


class TestCorrespondenceSet:
    def test_too_few_pairs_rejected(self):
        pts = lattice(3)  # 9 pairs
        with pytest.raises(DomainError):
            CorrespondenceSet(pts, pts)

    def test_duplicate_sources_rejected(self):
        pts = lattice(5)
        pts[1] = pts[0]
        with pytest.raises(DomainError):
            CorrespondenceSet(pts, pts + 0.1)


class TestFitWarp:
    def test_identity_lattice(self):
        pts = lattice(5)
        model = fit_warp(CorrespondenceSet(pts, pts), grid=(4, 4))
        rng = np.random.default_rng(0)
        q = interior_points(rng, 50)
        assert np.allclose(model(q), q, atol=1e-8)
        J = model.jacobian(q)
        assert np.allclose(J, np.eye(2), atol=1e-8)

    def test_affine_recovery(self):
        # oracle: the warp Jacobian of an affine map is its matrix
        rng = np.random.default_rng(1)
        A = np.array([[1.2, 0.3], [-0.2, 0.9]])
        b = np.array([0.05, -0.1])
        src = rng.uniform(-0.5, 0.5, size=(40, 2))
        tgt = src @ A.T + b
        model = fit_warp(CorrespondenceSet(src, tgt))
        q = interior_points(rng, 80)
        assert np.allclose(model(q), q @ A.T + b, rtol=1e-6, atol=1e-9)
        J = model.jacobian(q)
        assert np.allclose(J, A, rtol=1e-6, atol=1e-9)

    def test_rank_deficient_fit_raises(self):
        # collinear sources cannot pin a surface
        t = np.linspace(-0.5, 0.5, 20)
        src = np.column_stack([t, 2 * t])
        with pytest.raises(IllPosedFitError):
            fit_warp(CorrespondenceSet(src, src), smoothing=0.0)

    def test_grid_minimum(self):
        pts = lattice(5)
        with pytest.raises(DomainError):
            fit_warp(CorrespondenceSet(pts, pts), grid=(3, 4))


def smooth_test_warp(p):
    """Mildly nonlinear analytic warp used as fitting target."""
    u, v = p[..., 0], p[..., 1]
    ub = 1.1 * u + 0.2 * v + 0.05 * np.sin(2.0 * u) + 0.02 * v * v
    vb = -0.15 * u + 0.95 * v + 0.04 * np.cos(1.5 * v) + 0.03 * u * u
    return np.stack([ub, vb], axis=-1)


@pytest.fixture(scope="module")
def fitted_pair():
    rng = np.random.default_rng(7)
    src = np.vstack([lattice(9), rng.uniform(-0.5, 0.5, size=(60, 2))])
    tgt = smooth_test_warp(src)
    corr = CorrespondenceSet(src, tgt)
    return fit_warp_pair(corr, grid=(8, 8), smoothing=1e-7 * len(src))


class TestDerivativesAndRoundtrip:
    def test_derivatives_match_finite_differences(self, fitted_pair):
        model, _ = fitted_pair
        rng = np.random.default_rng(3)
        pts = interior_points(rng, 25)
        h = 1e-4
        for surf in (model.surf_u, model.surf_v):
            f0 = surf.evaluate(pts)
            eu = np.array([h, 0.0])
            ev = np.array([0.0, h])
            du_fd = (surf.evaluate(pts + eu) - surf.evaluate(pts - eu)) / (2 * h)
            dv_fd = (surf.evaluate(pts + ev) - surf.evaluate(pts - ev)) / (2 * h)
            duu_fd = (surf.evaluate(pts + eu) - 2 * f0 + surf.evaluate(pts - eu)) / h**2
            dvv_fd = (surf.evaluate(pts + ev) - 2 * f0 + surf.evaluate(pts - ev)) / h**2
            duv_fd = (
                surf.evaluate(pts + eu + ev)
                - surf.evaluate(pts + eu - ev)
                - surf.evaluate(pts - eu + ev)
                + surf.evaluate(pts - eu - ev)
            ) / (4 * h**2)
            for fd, (du, dv) in [
                (du_fd, (1, 0)),
                (dv_fd, (0, 1)),
                (duu_fd, (2, 0)),
                (dvv_fd, (0, 2)),
                (duv_fd, (1, 1)),
            ]:
                an = surf.evaluate(pts, du=du, dv=dv)
                scale = np.maximum(np.abs(fd), 1.0)
                assert np.all(np.abs(an - fd) / scale < 1e-5)

    def test_forward_inverse_roundtrip(self, fitted_pair):
        model, inverse = fitted_pair
        rng = np.random.default_rng(4)
        pts = interior_points(rng, 60)
        back = inverse(model(pts))
        assert np.all(np.linalg.norm(back - pts, axis=1) <= 1e-3)

    def test_jacobian_product_identity(self, fitted_pair):
        model, inverse = fitted_pair
        rng = np.random.default_rng(5)
        pts = interior_points(rng, 60)
        J = model.jacobian(pts)
        Jinv = inverse.jacobian(model(pts))
        prod = np.einsum("nij,njk->nik", Jinv, J)
        assert np.allclose(prod, np.eye(2), atol=1e-3)


class TestWarpJet:
    def test_identity_jet(self):
        pts = lattice(6)
        fwd, bwd = fit_warp_pair(CorrespondenceSet(pts, pts), grid=(4, 4))
        jet = warp_jet(fwd, bwd, np.array([0.1, -0.2]))
        assert np.allclose(jet.point, [0.1, -0.2], atol=1e-8)
        assert np.allclose(jet.jac3, np.eye(3), atol=1e-7)
        assert np.allclose(jet.djac3_du, 0.0, atol=1e-6)
        assert np.allclose(jet.djac3_dv, 0.0, atol=1e-6)
        assert np.allclose(jet.inv_jac, np.eye(2), atol=1e-7)

    def test_pure_scaling_jet(self):
        pts = lattice(6)
        fwd, bwd = fit_warp_pair(CorrespondenceSet(pts, 2.0 * pts), grid=(4, 4))
        jet = warp_jet(fwd, bwd, np.array([0.05, 0.1]))
        assert np.allclose(jet.jac, 2.0 * np.eye(2), atol=1e-7)
        assert np.allclose(jet.jac3, np.diag([2.0, 2.0, 4.0]), atol=1e-6)
        assert np.allclose(jet.djac3_du, 0.0, atol=1e-5)
        assert np.allclose(jet.djac3_dv, 0.0, atol=1e-5)
        assert np.allclose(jet.inv_jac, 0.5 * np.eye(2), atol=1e-7)

    def test_djac3_matches_finite_differences(self, fitted_pair):
        model, inverse = fitted_pair
        rng = np.random.default_rng(6)
        pts = interior_points(rng, 20)
        batch = warp_jets(model, inverse, pts)
        h = 1e-4
        for ax, step in ((0, np.array([h, 0.0])), (1, np.array([0.0, h]))):
            jp = warp_jets(model, inverse, pts + step, check=False)
            jn = warp_jets(model, inverse, pts - step, check=False)
            fd = (jp.jac3 - jn.jac3) / (2 * h)
            scale = np.maximum(np.abs(fd), 1.0)
            assert np.all(np.abs(batch.djac3[:, ax] - fd) / scale < 1e-4)

    def test_out_of_domain_raises(self, fitted_pair):
        model, inverse = fitted_pair
        with pytest.raises(ExtrapolationError):
            warp_jet(model, inverse, np.array([5.0, 5.0]))

    def test_fold_raises(self):
        # a warp collapsing u to a constant has det J = 0 everywhere
        src = lattice(7)
        tgt = src.copy()
        tgt[:, 0] = 0.1
        corr = CorrespondenceSet(src, tgt)
        fwd = fit_warp(corr, grid=(4, 4))
        bwd = fit_warp(CorrespondenceSet(lattice(7), lattice(7)), grid=(4, 4))
        with pytest.raises(DegenerateWarpError):
            warp_jet(fwd, bwd, np.array([0.0, 0.1]))

    def test_unchecked_mode_nans(self, fitted_pair):
        model, inverse = fitted_pair
        batch = warp_jets(
            model, inverse, np.array([[0.0, 0.0], [9.0, 9.0]]), check=False
        )
        assert np.all(np.isfinite(batch.point[0]))
        assert np.all(np.isnan(batch.point[1]))


class TestScalarSurface:
    def test_constant_surface(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-0.5, 0.5, size=(30, 2))
        model = fit_scalar_surface(pts, np.full(30, 2.5), grid=(5, 5))
        q = interior_points(rng, 40)
        assert np.allclose(model(q), 2.5, atol=1e-9)
        assert np.allclose(model(q, du=1), 0.0, atol=1e-8)
        assert np.allclose(model(q, dv=1), 0.0, atol=1e-8)

    def test_linear_gradient(self):
        # oracle: gradient of a*u + b*v is (a, b) everywhere
        a, b = 0.7, -1.3
        rng = np.random.default_rng(10)
        pts = rng.uniform(-0.5, 0.5, size=(40, 2))
        model = fit_scalar_surface(pts, a * pts[:, 0] + b * pts[:, 1])
        q = interior_points(rng, 40)
        assert np.allclose(model(q, du=1), a, atol=1e-7)
        assert np.allclose(model(q, dv=1), b, atol=1e-7)


class TestGradientSurface:
    def test_constant_gradient_integration(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.5, 0.5, size=(50, 2))
        grads = np.tile([0.2, -0.1], (50, 1))
        model = fit_gradient_surface(pts, grads, grid=(6, 6), smoothing=1e-8)
        vals = model(pts)
        expect = 0.2 * pts[:, 0] - 0.1 * pts[:, 1]
        # values agree up to one additive constant
        shift = np.mean(vals - expect)
        assert np.allclose(vals - shift, expect, atol=1e-8)

    def test_gradient_reproduced_at_samples(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform(-0.5, 0.5, size=(60, 2))
        # gradient field of f = sin(u)*cos(v): curl-free by construction
        grads = np.column_stack(
            [np.cos(pts[:, 0]) * np.cos(pts[:, 1]), -np.sin(pts[:, 0]) * np.sin(pts[:, 1])]
        )
        model = fit_gradient_surface(pts, grads, grid=(8, 8), smoothing=1e-8)
        gu = model(pts, du=1)
        gv = model(pts, dv=1)
        resid = np.sqrt(np.mean((gu - grads[:, 0]) ** 2 + (gv - grads[:, 1]) ** 2))
        assert resid < 5e-5
        assert abs(resid - model.residual_rms) < 5e-5
