"""Tests for mesh.py: generated triangulations, refinement, lifted quadrature and VTK export."""

import numpy as np
import numpy.testing as npt
import pytest

import geometry
import identities
import mesh
import tancalc
from service_models import FieldFamily, LevelSetSurface


def _outward_fraction(m: mesh.SurfaceMesh) -> float:
    v = m.vertices[m.triangles]
    face_normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n = geometry.evaluate(m.surface, geometry.closest_point(m.surface, v.mean(axis=1))).n
    return float(np.mean(np.einsum("ni,ni->n", face_normal, n) > 0.0))


# ===========================================================================
# Generation
# ===========================================================================

class TestIcosphere:
    @pytest.mark.parametrize("level, vertices, triangles", [(0, 12, 20), (1, 42, 80), (2, 162, 320)])
    def test_counts(self, level, vertices, triangles):
        m = mesh.gen_icosphere(level)
        assert m.vertices.shape == (vertices, 3)
        assert m.triangles.shape == (triangles, 3)

    def test_closed_and_on_surface(self):
        m = mesh.gen_icosphere(2, radius=2.0, center=(1.0, 0.0, -1.0))
        assert m.euler_characteristic == 2
        assert np.all(m.edge_valence() == 2)
        npt.assert_allclose(np.linalg.norm(m.vertices - [1.0, 0.0, -1.0], axis=1), 2.0, atol=1e-14)

    def test_outward_orientation(self):
        assert _outward_fraction(mesh.gen_icosphere(2)) == 1.0

    def test_negative_level(self):
        with pytest.raises(ValueError):
            mesh.gen_icosphere(-1)


class TestTorusMesh:
    def test_counts_and_topology(self):
        m = mesh.gen_torus(2.0, 0.5, 16, 8)
        assert m.vertices.shape == (128, 3)
        assert m.triangles.shape == (256, 3)
        assert m.euler_characteristic == 0
        assert np.all(m.edge_valence() == 2)

    def test_outward_orientation(self):
        assert _outward_fraction(mesh.gen_torus(2.0, 0.5, 16, 8)) == 1.0


class TestRefine:
    def test_refined_vertices_stay_on_surface(self):
        surface = LevelSetSurface.ellipsoid(1.5, 1.0, 0.75)
        fine = mesh.refine(mesh.mesh_for_surface(surface, 1))
        assert fine.level == 2
        assert len(fine.triangles) == 4 * 80
        npt.assert_allclose(geometry.signed_distance(surface, fine.vertices), 0.0, atol=1e-10)

    def test_mesh_size_halves(self):
        coarse = mesh.mesh_for_surface(LevelSetSurface.sphere(), 2)
        fine = mesh.refine(coarse)
        assert mesh.mesh_size(fine) / mesh.mesh_size(coarse) == pytest.approx(0.5, abs=0.08)


class TestMeshForSurface:
    def test_torus_lattice(self):
        m = mesh.mesh_for_surface(LevelSetSurface.torus(), 1)
        assert len(m.vertices) == 32 * 16

    def test_ellipsoid_vertices_on_surface(self):
        surface = LevelSetSurface.ellipsoid(1.5, 1.0, 0.75, center=(0.0, 1.0, 0.0))
        m = mesh.mesh_for_surface(surface, 2)
        npt.assert_allclose(geometry.signed_distance(surface, m.vertices), 0.0, atol=1e-10)

    def test_mesh_at_time_follows_growth(self):
        surface = LevelSetSurface.sphere(growth_rate=0.1)
        m = mesh.mesh_at_time(mesh.mesh_for_surface(surface, 1), 2.0)
        npt.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.2, atol=1e-14)
        assert m.time == 2.0


# ===========================================================================
# Quadrature
# ===========================================================================

class TestQuadrature:
    def test_reference_rule(self):
        npt.assert_allclose(mesh.QUAD_WEIGHTS.sum(), 0.5, atol=1e-12)
        npt.assert_allclose(mesh.QUAD_BARY.sum(axis=1), 1.0, atol=1e-15)

    def test_unit_sphere_area(self):
        quad = mesh.build_quadrature(mesh.mesh_for_surface(LevelSetSurface.sphere(), 3))
        npt.assert_allclose(mesh.integrate(quad, lambda x, t: np.ones(len(x))), 4.0 * np.pi, rtol=1e-4)

    def test_torus_area(self):
        quad = mesh.build_quadrature(mesh.mesh_for_surface(LevelSetSurface.torus(2.0, 0.5), 2))
        npt.assert_allclose(quad.weights.sum(), 4.0 * np.pi ** 2, rtol=1e-3)

    def test_points_lie_on_surface(self):
        surface = LevelSetSurface.torus(2.0, 0.5)
        quad = mesh.build_quadrature(mesh.mesh_for_surface(surface, 0))
        npt.assert_allclose(geometry.signed_distance(surface, quad.points.reshape(-1, 3)), 0.0, atol=1e-12)

    def test_jacobian_is_tangential(self):
        quad = mesh.build_quadrature(mesh.mesh_for_surface(LevelSetSurface.sphere(), 1))
        npt.assert_allclose(np.einsum("tqi,tqir->tqr", quad.n, quad.jacobian), 0.0, atol=1e-13)

    def test_second_moment(self):
        # int_S x3^2 = 4 pi / 3 on the unit sphere
        quad = mesh.build_quadrature(mesh.mesh_for_surface(LevelSetSurface.sphere(), 3))
        npt.assert_allclose(mesh.integrate(quad, quad.points[..., 2] ** 2), 4.0 * np.pi / 3.0, rtol=1e-3)

    def test_surface_divergence_integrates_to_zero(self):
        surface = LevelSetSurface.sphere()
        v = identities.build_fields(surface, FieldFamily.TANGENTIAL_CUBIC)["u"]
        quad = mesh.build_quadrature(mesh.mesh_for_surface(surface, 3))
        div = tancalc.div_surface_vector(v, quad.points.reshape(-1, 3)).reshape(quad.shape)
        assert abs(mesh.integrate(quad, div)) <= 1e-3 * mesh.integrate(quad, np.abs(div))


# ===========================================================================
# Export
# ===========================================================================

class TestWriteVtk:
    def test_polydata_layout(self, tmp_path):
        m = mesh.gen_icosphere(0)
        path = mesh.write_vtk(tmp_path / "fields" / "ico.vtk", m,
                              {"height": m.vertices[:, 2], "position": m.vertices})
        text = path.read_text().splitlines()
        assert text[0] == "# vtk DataFile Version 3.0"
        assert "DATASET POLYDATA" in text
        assert "POINTS 12 double" in text
        assert "POLYGONS 20 80" in text
        assert "SCALARS height double 1" in text
        assert "VECTORS position double" in text

    def test_rejects_wrong_length(self, tmp_path):
        m = mesh.gen_icosphere(0)
        with pytest.raises(ValueError):
            mesh.write_vtk(tmp_path / "bad.vtk", m, {"x": np.zeros(5)})
