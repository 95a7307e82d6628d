"""Tests for tancalc.py: finite-difference tangential operators on normally extended fields."""

import logging

import numpy as np
import numpy.testing as npt
import pytest

import geometry
import tancalc
from errors import StencilOutOfNeighborhood
from service_models import Arity, ExtensionMode, LevelSetSurface
from tancalc import AmbientField


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _p3(*xyz) -> np.ndarray:
    """Single 3-D point as shape ``(1, 3)``."""
    return np.array([list(xyz)], dtype=float)


def _scalar(surface, fn, mode=ExtensionMode.NORMAL_EXTEND):
    return AmbientField(arity=Arity.SCALAR, fn=lambda x, t: fn(x), surface=surface, extension_mode=mode)


def _vector(surface, fn, mode=ExtensionMode.NORMAL_EXTEND):
    return AmbientField(arity=Arity.VECTOR3, fn=lambda x, t: fn(x), surface=surface, extension_mode=mode)


def _rotation(surface, axis=(0.0, 0.0, 1.0)):
    a = np.asarray(axis, dtype=float)
    c = np.asarray(surface.center)
    return _vector(surface, lambda x: np.cross(a, x - c))


OMEGA = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])  # e3 x (.)
UNIT_SPHERE = LevelSetSurface.sphere()
TORUS = LevelSetSurface.torus(2.0, 0.5)


# ===========================================================================
# AmbientField
# ===========================================================================

class TestAmbientField:
    def test_normal_extension_is_constant_along_normals(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 2])
        npt.assert_allclose(f(_p3(0.0, 0.6, 0.8) * 1.3), [0.8], atol=1e-14)

    def test_given_mode_evaluates_in_place(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 2], ExtensionMode.GIVEN_ON_NEIGHBORHOOD)
        npt.assert_allclose(f(_p3(0.0, 0.6, 0.8) * 1.3), [1.04], atol=1e-14)

    def test_constant_output_is_broadcast(self):
        f = AmbientField(arity=Arity.MATRIX3, fn=lambda x, t: np.eye(3), surface=UNIT_SPHERE)
        assert f(geometry.sample_points(UNIT_SPHERE, 5)).shape == (5, 3, 3)


# ===========================================================================
# First-order operators
# ===========================================================================

class TestGradSurfaceScalar:
    def test_constant(self):
        f = _scalar(UNIT_SPHERE, lambda x: np.full(len(x), 3.0))
        npt.assert_allclose(tancalc.grad_surface_scalar(f, _p3(1.0, 0.0, 0.0)), [[0.0, 0.0, 0.0]], atol=1e-12)

    def test_height_function(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 2])
        npt.assert_allclose(tancalc.grad_surface_scalar(f, _p3(1.0, 0.0, 0.0)), [[0.0, 0.0, 1.0]], atol=1e-7)

    def test_vanishing_projection(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 0] ** 2)
        npt.assert_allclose(tancalc.grad_surface_scalar(f, _p3(0.0, 1.0, 0.0)), [[0.0, 0.0, 0.0]], atol=1e-7)

    def test_result_is_tangential_on_torus(self):
        f = _scalar(TORUS, lambda x: x[:, 0] * x[:, 1] + x[:, 2] ** 3)
        pts = geometry.sample_points(TORUS, 30)
        grad = tancalc.grad_surface_scalar(f, pts)
        n = geometry.evaluate(TORUS, pts).n
        normal = np.abs(np.einsum("ni,ni->n", grad, n))
        assert np.all(normal <= 1e-6 * np.linalg.norm(grad, axis=1) + 1e-12)

    def test_extension_independence(self):
        fn = lambda x: x[:, 0] * x[:, 1] + x[:, 2]  # noqa: E731
        pts = geometry.sample_points(TORUS, 30, seed=1)
        extended = tancalc.grad_surface_scalar(_scalar(TORUS, fn), pts)
        given = tancalc.grad_surface_scalar(_scalar(TORUS, fn, ExtensionMode.GIVEN_ON_NEIGHBORHOOD), pts)
        npt.assert_allclose(extended, given, rtol=1e-6, atol=1e-9)

    def test_large_step_leaves_neighborhood(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 2])
        with pytest.raises(StencilOutOfNeighborhood):
            tancalc.grad_surface_scalar(f, _p3(1.0, 0.0, 0.0), step=3.0)


class TestGradSurfaceVector:
    def test_constant_vector(self):
        v = _vector(UNIT_SPHERE, lambda x: np.array([1.0, 2.0, 3.0]))
        npt.assert_allclose(tancalc.grad_surface_vector(v, _p3(0.0, 0.0, 1.0)), np.zeros((1, 3, 3)), atol=1e-12)

    def test_position_gives_projector(self):
        v = _vector(UNIT_SPHERE, lambda x: x)
        pts = geometry.sample_points(UNIT_SPHERE, 10)
        npt.assert_allclose(tancalc.grad_surface_vector(v, pts), geometry.evaluate(UNIT_SPHERE, pts).P, atol=1e-7)

    def test_rotation(self):
        x = _p3(0.6, 0.0, 0.8)
        P = geometry.evaluate(UNIT_SPHERE, x).P
        npt.assert_allclose(tancalc.grad_surface_vector(_rotation(UNIT_SPHERE), x), P @ OMEGA @ P, atol=1e-7)


class TestDivergence:
    def test_position(self):
        v = _vector(UNIT_SPHERE, lambda x: x)
        npt.assert_allclose(tancalc.div_surface_vector(v, geometry.sample_points(UNIT_SPHERE, 10)), 2.0, atol=1e-7)

    def test_rotation_is_divergence_free(self):
        pts = geometry.sample_points(TORUS, 10)
        npt.assert_allclose(tancalc.div_surface_vector(_rotation(TORUS), pts), 0.0, atol=1e-7)

    def test_matrix_divergence_of_pressure_projector(self):
        pts = geometry.sample_points(UNIT_SPHERE, 10)
        g = geometry.evaluate(UNIT_SPHERE, pts)
        A = AmbientField(arity=Arity.MATRIX3, surface=UNIT_SPHERE,
                         fn=lambda x, t: x[:, 2, None, None] * geometry.evaluate(UNIT_SPHERE, x).P)
        expected = g.P[:, 2, :] - (pts[:, 2] * g.kappa)[:, None] * g.n
        npt.assert_allclose(tancalc.div_surface_matrix(A, pts), expected, atol=1e-6)


class TestRateOfStrain:
    def test_rotation_has_no_strain(self):
        pts = geometry.sample_points(TORUS, 10)
        npt.assert_allclose(tancalc.rate_of_strain(_rotation(TORUS), pts), 0.0, atol=1e-7)

    def test_position_gives_projector(self):
        v = _vector(UNIT_SPHERE, lambda x: x)
        pts = geometry.sample_points(UNIT_SPHERE, 10)
        npt.assert_allclose(tancalc.rate_of_strain(v, pts), geometry.evaluate(UNIT_SPHERE, pts).P, atol=1e-7)

    def test_symmetric_and_tangential(self):
        v = tancalc.tangential_part(_vector(UNIT_SPHERE, lambda x: np.broadcast_to([0.0, 0.0, 1.0], x.shape)))
        pts = geometry.sample_points(UNIT_SPHERE, 10)
        E = tancalc.rate_of_strain(v, pts)
        P = geometry.evaluate(UNIT_SPHERE, pts).P
        npt.assert_allclose(E, np.swapaxes(E, 1, 2), atol=1e-14)
        npt.assert_allclose(P @ E @ P, E, atol=1e-12)


class TestStressTensor:
    def test_pressure_only(self):
        pi = _scalar(UNIT_SPHERE, lambda x: np.ones(len(x)))
        v = _vector(UNIT_SPHERE, lambda x: np.zeros(3))
        pts = geometry.sample_points(UNIT_SPHERE, 5)
        npt.assert_allclose(tancalc.stress_tensor(pi, v, pts), -geometry.evaluate(UNIT_SPHERE, pts).P, atol=1e-12)

    def test_rotation_without_pressure(self):
        pi = _scalar(UNIT_SPHERE, lambda x: np.zeros(len(x)))
        npt.assert_allclose(tancalc.stress_tensor(pi, _rotation(UNIT_SPHERE), geometry.sample_points(UNIT_SPHERE, 5)),
                            0.0, atol=1e-7)

    def test_height_pressure_with_position(self):
        pi = _scalar(UNIT_SPHERE, lambda x: x[:, 2])
        v = _vector(UNIT_SPHERE, lambda x: x)
        pts = geometry.sample_points(UNIT_SPHERE, 5)
        P = geometry.evaluate(UNIT_SPHERE, pts).P
        expected = (2.0 - pts[:, 2])[:, None, None] * P
        npt.assert_allclose(tancalc.stress_tensor(pi, v, pts, mu=1.0), expected, atol=1e-6)


# ===========================================================================
# Second-order operators
# ===========================================================================

class TestBochnerLaplacian:
    def test_zero_field(self):
        v = _vector(UNIT_SPHERE, lambda x: np.zeros(3))
        npt.assert_allclose(tancalc.bochner_laplacian(v, geometry.sample_points(UNIT_SPHERE, 5)), 0.0, atol=1e-12)

    @pytest.mark.parametrize("R", [1.0, 2.0])
    def test_rotation_is_eigenfield(self, R):
        s = LevelSetSurface.sphere(R)
        v = _rotation(s)
        pts = geometry.sample_points(s, 10)
        npt.assert_allclose(tancalc.bochner_laplacian(v, pts), -v(pts) / R ** 2, atol=1e-5)


class TestMaterialDerivative:
    def test_static_field_at_rest(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 0] * x[:, 1])
        u = _vector(UNIT_SPHERE, lambda x: np.zeros(3))
        npt.assert_allclose(tancalc.material_derivative(f, u, geometry.sample_points(UNIT_SPHERE, 5)), 0.0, atol=1e-12)

    def test_distance_follows_expanding_sphere(self):
        s = LevelSetSurface.sphere(growth_rate=0.1)
        d = AmbientField(arity=Arity.SCALAR, fn=lambda x, t: geometry.signed_distance(s, x, t), surface=s,
                         extension_mode=ExtensionMode.GIVEN_ON_NEIGHBORHOOD)
        u = AmbientField(arity=Arity.VECTOR3, fn=lambda x, t: 0.1 * x / np.linalg.norm(x, axis=1)[:, None],
                         surface=s, extension_mode=ExtensionMode.GIVEN_ON_NEIGHBORHOOD)
        npt.assert_allclose(tancalc.material_derivative(d, u, geometry.sample_points(s, 5)), 0.0, atol=1e-8)

    def test_coordinate_under_rotation(self):
        f = _scalar(UNIT_SPHERE, lambda x: x[:, 0], ExtensionMode.GIVEN_ON_NEIGHBORHOOD)
        u = _vector(UNIT_SPHERE, lambda x: np.cross([0.0, 0.0, 1.0], x), ExtensionMode.GIVEN_ON_NEIGHBORHOOD)
        npt.assert_allclose(tancalc.material_derivative(f, u, _p3(0.6, 0.8, 0.0)), [-0.8], atol=1e-10)


class TestNormalReaction:
    def test_laplace_term(self):
        u = _vector(UNIT_SPHERE, lambda x: np.zeros(3))
        pi = _scalar(UNIT_SPHERE, lambda x: np.ones(len(x)))
        npt.assert_allclose(tancalc.normal_reaction(u, pi, geometry.sample_points(UNIT_SPHERE, 5), rho=3.0),
                            -2.0, atol=1e-12)

    @pytest.mark.parametrize("mu", [0.0, 1.0])
    def test_rotation_centripetal_term(self, mu):
        pi = _scalar(UNIT_SPHERE, lambda x: np.zeros(len(x)))
        b_N = tancalc.normal_reaction(_rotation(UNIT_SPHERE), pi, _p3(1.0, 0.0, 0.0), mu=mu, rho=1.0)
        npt.assert_allclose(b_N, [-1.0], atol=1e-7)


class TestNoiseWarning:
    def test_tiny_nested_steps_warn(self, caplog):
        v = tancalc.tangential_part(_vector(UNIT_SPHERE, lambda x: x ** 2))
        with caplog.at_level(logging.WARNING, logger="tansurf.tancalc"):
            tancalc.bochner_laplacian(v, geometry.sample_points(UNIT_SPHERE, 3), steps=(1e-7, 1e-9))
        assert any("noise" in record.message for record in caplog.records)
