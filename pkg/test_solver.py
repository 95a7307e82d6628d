"""Tests for solver.py: saddle solves, error norms and discrete constants."""

import numpy as np
import numpy.testing as npt
import pytest
import scipy.sparse as sp

import assembly
import identities
import mesh
import solver
from errors import InconsistentRhs, SingularSystem, TooLarge
from service_models import Formulation, LevelSetSurface, PressureKind

UNIT_SPHERE = LevelSetSurface.sphere()


def _e3(x, t):
    return np.tile([0.0, 0.0, 1.0], (len(x), 1))


def _projected_e3(x, t):
    n = np.asarray(x) / np.linalg.norm(x, axis=1)[:, None]
    return _e3(x, t) - n[:, 2:3] * n


@pytest.fixture(scope="module")
def sphere1():
    return assembly.build_spaces(mesh.mesh_for_surface(UNIT_SPHERE, 1))


@pytest.fixture(scope="module")
def sphere2():
    return assembly.build_spaces(mesh.mesh_for_surface(UNIT_SPHERE, 2))


# ===========================================================================
# Block matrix and load
# ===========================================================================

class TestSaddleMatrix:
    def test_block_ranges(self, sphere1):
        system = assembly.assemble_system(sphere1, Formulation.MULTIPLIER, 1.0)
        K, ranges = solver.saddle_matrix(system)
        assert list(ranges) == ["velocity", "pressure", "multiplier", "gauge", "killing"]
        assert K.shape == (486 + 42 + 42 + 1 + 3,) * 2
        assert abs(K - K.T).max() == 0.0

    def test_no_killing_block_on_ellipsoid(self):
        spaces = assembly.build_spaces(mesh.mesh_for_surface(LevelSetSurface.ellipsoid(1.5, 1.0, 0.75), 0))
        _, ranges = solver.saddle_matrix(assembly.assemble_system(spaces, Formulation.AUGMENTED_TANGENTIAL, 1.0,
                                                                  tau=100.0))
        assert "killing" not in ranges
        assert "multiplier" not in ranges


class TestOrthogonalizeRhs:
    def test_small_killing_component_is_removed(self, sphere1):
        mass = assembly.velocity_mass(sphere1)
        K = assembly.killing_fields(sphere1)
        rhs = assembly.assemble_rhs(sphere1, _e3) + 1e-3 * (mass @ K[:, 0])
        corrected, correction = solver.orthogonalize_rhs(rhs, mass, K)
        npt.assert_allclose(K.T @ corrected, 0.0, atol=1e-12)
        assert 0.0 < correction < 0.1

    def test_rotation_load_is_rejected(self, sphere1):
        mass = assembly.velocity_mass(sphere1)
        K = assembly.killing_fields(sphere1)
        with pytest.raises(InconsistentRhs) as info:
            solver.orthogonalize_rhs(mass @ K[:, 2], mass, K, killing_tol=0.25)
        message = str(info.value)
        assert "compatibility condition" in message
        assert "Killing field 2" in message
        assert "killing_tol = 0.25" in message
        assert "cosine 1 " in message


# ===========================================================================
# Direct solves
# ===========================================================================

class TestSolveSaddle:
    @pytest.mark.parametrize("formulation", list(Formulation))
    def test_zero_load_gives_zero_solution(self, sphere1, formulation):
        system = assembly.assemble_system(sphere1, formulation, 1.0, tau=100.0)
        report = solver.solve_saddle(system)
        npt.assert_array_equal(report.velocity, 0.0)
        npt.assert_array_equal(report.pressure, 0.0)
        assert report.u_N_l2 == 0.0

    def test_scaling_invariance(self, sphere1):
        base = assembly.assemble_system(sphere1, Formulation.AUGMENTED_TANGENTIAL, 1.0, tau=100.0, f=_e3)
        scaled = assembly.assemble_system(sphere1, Formulation.AUGMENTED_TANGENTIAL, 10.0, tau=1000.0,
                                          f=lambda x, t: 10.0 * _e3(x, t))
        a, b = solver.solve_saddle(base), solver.solve_saddle(scaled)
        npt.assert_allclose(b.velocity, a.velocity, atol=1e-8)
        npt.assert_allclose(b.pressure, 10.0 * a.pressure, atol=1e-7)

    @pytest.mark.parametrize("formulation", [Formulation.MULTIPLIER, Formulation.AUGMENTED_TANGENTIAL,
                                             Formulation.AUGMENTED_FULL])
    def test_gradient_load_is_balanced_by_pressure(self, sphere2, formulation):
        system = assembly.assemble_system(sphere2, formulation, 1.0, tau=100.0, f=_projected_e3)
        report = solver.solve_saddle(system)
        z = sphere2.mesh.vertices[:, 2]
        assert np.abs(report.pressure - z).max() < 0.1
        assert np.abs(report.velocity).max() < 0.1
        assert report.residual_norm < 1e-9

    def test_multiplier_report(self, sphere1):
        report = solver.solve_saddle(assembly.assemble_system(sphere1, Formulation.MULTIPLIER, 1.0, f=_e3))
        assert report.multiplier_dofs == 42
        assert report.killing_rows == 3
        assert len(report.multiplier) == 42
        assert "velocity" not in report.model_dump()

    def test_tangential_solution_is_nodally_tangential(self, sphere1):
        report = solver.solve_saddle(assembly.assemble_system(sphere1, Formulation.TANGENTIAL, 1.0, f=_e3))
        normals = sphere1.nodes
        npt.assert_allclose(np.einsum("ni,ni->n", report.velocity.reshape(-1, 3), normals), 0.0, atol=1e-12)
        assert report.velocity_dofs == 324

    def test_rotation_load_is_rejected(self, sphere1):
        system = assembly.assemble_system(sphere1, Formulation.MULTIPLIER, 1.0,
                                          f=lambda x, t: np.cross([0.0, 0.0, 1.0], x))
        with pytest.raises(InconsistentRhs):
            solver.solve_saddle(system)

    def test_missing_gauge_is_singular(self, sphere1):
        system = assembly.assemble_system(sphere1, Formulation.AUGMENTED_TANGENTIAL, 1.0, tau=100.0, f=_e3)
        broken = system.model_copy(update={"c_p": sp.csr_matrix((1, sphere1.pressure_dofs))})
        with pytest.raises(SingularSystem):
            solver.solve_saddle(broken)

    def test_formulation_mismatch(self, sphere1):
        system = assembly.assemble_system(sphere1, Formulation.MULTIPLIER, 1.0)
        with pytest.raises(ValueError):
            solver.solve_saddle(system, Formulation.AUGMENTED_FULL)

    def test_minres_agrees_with_direct(self, sphere1):
        system = assembly.assemble_system(sphere1, Formulation.AUGMENTED_TANGENTIAL, 1.0, tau=100.0, f=_e3)
        direct = solver.solve_saddle(system)
        check = solver.minres_cross_check(system, direct)
        assert check["iterations"] > 0
        assert check["relative_difference"] < 1e-3


# ===========================================================================
# Norms
# ===========================================================================

class TestErrorNorms:
    def test_zero_solution_measures_exact_field(self, sphere2):
        u = identities.rotation_field(UNIT_SPHERE, (0.0, 0.0, 1.0))
        norms = solver.error_norms(sphere2, np.zeros(sphere2.velocity_dofs), None, u)
        npt.assert_allclose(norms.velocity_l2, np.sqrt(8.0 * np.pi / 3.0), rtol=1e-3)
        assert norms.velocity_h1 > norms.velocity_l2
        assert norms.pressure_l2 is None

    def test_interpolant_error_is_small(self, sphere2):
        u = identities.rotation_field(UNIT_SPHERE, (1.0, 0.0, 0.0))
        coeffs = assembly.interpolate(sphere2, u)
        norms = solver.error_norms(sphere2, coeffs, np.zeros(sphere2.pressure_dofs), u,
                                   p_exact=lambda x, t: np.full(len(x), 3.0))
        scale = solver.error_norms(sphere2, np.zeros(sphere2.velocity_dofs), None, u).velocity_h1
        assert norms.velocity_h1 < 0.05 * scale
        assert norms.pressure_l2 == pytest.approx(0.0, abs=1e-12)

    def test_normal_l2(self, sphere2):
        coeffs = assembly.interpolate(sphere2, lambda x, t: 2.0 * np.asarray(x))
        npt.assert_allclose(solver.u_N_l2(sphere2, coeffs), 2.0 * np.sqrt(4.0 * np.pi), rtol=5e-3)


# ===========================================================================
# Constants
# ===========================================================================

class TestConstants:
    def test_sphere_constants_are_positive(self, sphere1):
        report = solver.estimate_constants(sphere1)
        assert report.korn_h > 1e-2
        assert report.infsup_h > 1e-2
        assert report.korn_h_unconstrained < report.korn_h

    def test_constants_plateau_over_levels(self):
        reports = [solver.estimate_constants(assembly.build_spaces(mesh.mesh_for_surface(UNIT_SPHERE, level)))
                   for level in (1, 2, 3)]
        korn = np.array([r.korn_h for r in reports])
        infsup = np.array([r.infsup_h for r in reports])
        assert np.all(korn > 0.05)
        assert np.all(infsup > 0.05)
        assert np.all(np.abs(np.diff(korn)) / korn[:-1] < 0.2)
        assert np.all(np.abs(np.diff(infsup)) / infsup[:-1] < 0.2)
        assert reports[-1].korn_h_unconstrained < 0.1 * reports[-1].korn_h

    def test_constant_pressure_has_no_infsup(self):
        spaces = assembly.build_spaces(mesh.mesh_for_surface(UNIT_SPHERE, 0), pressure_kind=PressureKind.CONSTANT)
        assert solver.estimate_infsup(spaces) is None

    def test_no_killing_fields_means_no_constraint(self):
        spaces = assembly.build_spaces(mesh.mesh_for_surface(LevelSetSurface.ellipsoid(1.5, 1.0, 0.75), 0))
        report = solver.estimate_korn(spaces)
        assert report.korn_h == report.korn_h_unconstrained
        assert report.korn_h > 0.0

    def test_dense_cap(self):
        spaces = assembly.build_spaces(mesh.mesh_for_surface(UNIT_SPHERE, 4))
        with pytest.raises(TooLarge):
            solver.estimate_korn(spaces)
