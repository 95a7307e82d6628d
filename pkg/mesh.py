"""
Tansurf Mesh Layer
Triangulations of the analytic surfaces plus quadrature lifted onto the exact surface.

Key Logic:
- Sphere/ellipsoid: icosahedron refined by 1->4 splits, new vertices lifted to the
  surface immediately; the ellipsoid is the unit icosphere mapped by c + a*u.
- Torus: structured (major x minor) parameter lattice, alternating diagonals.
- Quadrature: 6-point degree-4 triangle rule on the flat triangle, mapped to the
  surface by the closest-point map. Weights carry the lifted Jacobian
  J = (I + d H)^-1 P J_flat, and n, P, H, kappa, K are cached per point from the
  exact level set.
"""
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

import geometry
from service_models import LevelSetSurface, SurfaceKind

logger = logging.getLogger("tansurf.mesh")

# --- CONFIG ---
TORUS_BASE_MAJOR = 16
TORUS_BASE_MINOR = 8

_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0
ICOSAHEDRON_VERTICES = np.array([
    [-1.0, _GOLDEN, 0.0], [1.0, _GOLDEN, 0.0], [-1.0, -_GOLDEN, 0.0], [1.0, -_GOLDEN, 0.0],
    [0.0, -1.0, _GOLDEN], [0.0, 1.0, _GOLDEN], [0.0, -1.0, -_GOLDEN], [0.0, 1.0, -_GOLDEN],
    [_GOLDEN, 0.0, -1.0], [_GOLDEN, 0.0, 1.0], [-_GOLDEN, 0.0, -1.0], [-_GOLDEN, 0.0, 1.0],
])
ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])

# degree-4 symmetric rule, barycentric (lambda0, lambda1, lambda2); weights sum to 1
_A, _WA = 0.445948490915965, 0.223381589678011
_B, _WB = 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [_A, _A, 1.0 - 2.0 * _A], [_A, 1.0 - 2.0 * _A, _A], [1.0 - 2.0 * _A, _A, _A],
    [_B, _B, 1.0 - 2.0 * _B], [_B, 1.0 - 2.0 * _B, _B], [1.0 - 2.0 * _B, _B, _B],
])
QUAD_WEIGHTS = 0.5 * np.array([_WA, _WA, _WA, _WB, _WB, _WB])  # reference triangle area 1/2


class SurfaceMesh(BaseModel):
    """
    Triangulation with vertices on the surface at `time`. Triangles are ordered
    counterclockwise seen from outside.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    vertices: np.ndarray
    triangles: np.ndarray
    surface: LevelSetSurface
    level: int = 0
    time: float = 0.0

    @property
    def h(self) -> float:
        edges, _ = self.edge_table()
        return float(np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1).max())

    def edge_table(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Unique edges (E, 2) with sorted endpoints, and per-triangle edge ids (T, 3)
        for the local edges (0,1), (1,2), (2,0).
        """
        tri = self.triangles
        local = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1).reshape(-1, 2)
        edges, inverse = np.unique(np.sort(local, axis=1), axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    def edge_valence(self) -> np.ndarray:
        _, tri_edges = self.edge_table()
        return np.bincount(tri_edges.ravel())

    @property
    def euler_characteristic(self) -> int:
        edges, _ = self.edge_table()
        return len(self.vertices) - len(edges) + len(self.triangles)


# --- GENERATION ---

def _split(vertices: np.ndarray, triangles: np.ndarray, lift) -> Tuple[np.ndarray, np.ndarray]:
    local = np.stack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1).reshape(-1, 2)
    edges, inverse = np.unique(np.sort(local, axis=1), axis=0, return_inverse=True)
    mids = lift(0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]]))
    m = len(vertices) + inverse.reshape(-1, 3)
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
    children = np.concatenate([
        np.column_stack([a, m01, m20]),
        np.column_stack([m01, b, m12]),
        np.column_stack([m20, m12, c]),
        np.column_stack([m01, m12, m20]),
    ])
    return np.vstack([vertices, mids]), children


def _orient_outward(vertices: np.ndarray, triangles: np.ndarray, surface: LevelSetSurface, t: float) -> np.ndarray:
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    face_normal = np.cross(v1 - v0, v2 - v0)
    centroid_normal = geometry.evaluate(surface, (v0 + v1 + v2) / 3.0, t).n
    flip = np.einsum("ni,ni->n", face_normal, centroid_normal) < 0.0
    oriented = triangles.copy()
    oriented[flip] = oriented[flip][:, [0, 2, 1]]
    return oriented


def gen_icosphere(level: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """
    Icosphere with 20 * 4^level triangles and all vertices on the exact sphere.
    """
    if level < 0:
        raise ValueError("level must be nonnegative")
    c = np.asarray(center, dtype=float)
    unit = ICOSAHEDRON_VERTICES / np.linalg.norm(ICOSAHEDRON_VERTICES, axis=1)[:, None]
    vertices, triangles = unit, ICOSAHEDRON_FACES.copy()
    for _ in range(level):
        vertices, triangles = _split(vertices, triangles, lambda x: x / np.linalg.norm(x, axis=1)[:, None])
    surface = LevelSetSurface.sphere(radius, tuple(c))
    return SurfaceMesh(vertices=c + radius * vertices, triangles=triangles, surface=surface, level=level)


def gen_torus(R: float, r: float, n_major: int, n_minor: int, center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Torus lattice with n_major * n_minor vertices and twice as many triangles."""
    surface = LevelSetSurface.torus(R, r, tuple(center))
    phi = 2.0 * np.pi * np.arange(n_major) / n_major
    theta = 2.0 * np.pi * np.arange(n_minor) / n_minor
    P_, T_ = np.meshgrid(phi, theta, indexing="ij")
    ring = R + r * np.cos(T_)
    vertices = np.column_stack([(ring * np.cos(P_)).ravel(), (ring * np.sin(P_)).ravel(), (r * np.sin(T_)).ravel()])
    vertices = vertices + np.asarray(center, dtype=float)

    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ip, jp = (i + 1) % n_major, (j + 1) % n_minor
    v00, v10, v11, v01 = i * n_minor + j, ip * n_minor + j, ip * n_minor + jp, i * n_minor + jp
    even = (i + j) % 2 == 0
    first = np.where(even[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01]))
    second = np.where(even[:, None], np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01]))
    triangles = _orient_outward(vertices, np.concatenate([first, second]), surface, 0.0)
    return SurfaceMesh(vertices=vertices, triangles=triangles, surface=surface)


def refine(mesh: SurfaceMesh) -> SurfaceMesh:
    """1->4 split with edge midpoints lifted by the closest-point map."""
    vertices, triangles = _split(mesh.vertices, mesh.triangles,
                                 lambda x: geometry.closest_point(mesh.surface, x, mesh.time))
    return SurfaceMesh(vertices=vertices, triangles=triangles, surface=mesh.surface,
                       level=mesh.level + 1, time=mesh.time)


def mesh_for_surface(surface: LevelSetSurface, level: int, t: float = 0.0) -> SurfaceMesh:
    """
    Standard mesh of refinement `level` for any surface kind: lifted icosphere for
    spheres and ellipsoids, a 16*2^level x 8*2^level lattice for the torus.
    """
    s = geometry.scale_factor(surface, t)
    c = np.asarray(surface.center, dtype=float)
    if surface.kind == SurfaceKind.TORUS:
        k = 2 ** level
        base = gen_torus(s * surface.major_radius, s * surface.minor_radius,
                         TORUS_BASE_MAJOR * k, TORUS_BASE_MINOR * k, surface.center)
        vertices, triangles = base.vertices, base.triangles
    else:
        unit = gen_icosphere(level)
        semi = geometry.semi_extent(surface)
        vertices, triangles = c + s * semi * unit.vertices, unit.triangles
    mesh = SurfaceMesh(vertices=vertices, triangles=triangles, surface=surface, level=level, time=t)
    logger.debug("mesh %s level %d: %d vertices, %d triangles", surface.kind, level, len(vertices), len(triangles))
    return mesh


def mesh_at_time(mesh: SurfaceMesh, t: float) -> SurfaceMesh:
    """Moves the vertices with the surface scaling about its center."""
    c = np.asarray(mesh.surface.center, dtype=float)
    ratio = geometry.scale_factor(mesh.surface, t) / geometry.scale_factor(mesh.surface, mesh.time)
    return mesh.model_copy(update={"vertices": c + ratio * (mesh.vertices - c), "time": t})


def mesh_size(mesh: SurfaceMesh) -> float:
    return mesh.h


# --- QUADRATURE ---

class LiftedQuadrature(BaseModel):
    """
    Quadrature data of shape (T, Q, ...): lifted points, weights with the
    surface Jacobian, the 3x2 lifted Jacobian, its inverse metric, and the exact
    geometry at every point.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    points: np.ndarray
    weights: np.ndarray
    jacobian: np.ndarray
    metric_inv: np.ndarray
    bary: np.ndarray
    d: np.ndarray
    n: np.ndarray
    P: np.ndarray
    H: np.ndarray
    kappa: np.ndarray
    K: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape


def build_quadrature(mesh: SurfaceMesh) -> LiftedQuadrature:
    v = mesh.vertices[mesh.triangles]                              # (T, 3, 3)
    flat = np.einsum("qa,tai->tqi", QUAD_BARY, v)                  # (T, Q, 3)
    J_flat = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)  # (T, 3, 2)
    T, Q = flat.shape[:2]

    g = geometry.evaluate(mesh.surface, flat.reshape(-1, 3), mesh.time)
    shift = np.eye(3)[None] + g.d[:, None, None] * g.H
    lift = np.linalg.solve(shift, g.P)                             # (I + dH)^-1 P
    J = lift.reshape(T, Q, 3, 3) @ J_flat[:, None, :, :]
    metric = np.swapaxes(J, -1, -2) @ J
    area = np.sqrt(np.linalg.det(metric))

    def per_point(a):
        return a.reshape((T, Q) + a.shape[1:])

    return LiftedQuadrature(
        points=per_point(g.p),
        weights=QUAD_WEIGHTS[None, :] * area,
        jacobian=J,
        metric_inv=np.linalg.inv(metric),
        bary=QUAD_BARY,
        d=per_point(g.d),
        n=per_point(g.n),
        P=per_point(g.P),
        H=per_point(g.H),
        kappa=per_point(g.kappa),
        K=per_point(g.K),
    )


def integrate(quad: LiftedQuadrature, field, t: Optional[float] = None):
    """
    Surface integral sum_q w_q f(x_q).

    Args:
        quad: Lifted quadrature.
        field: Either a callable field f(points, t) or values shaped (T, Q, ...).
        t: Evaluation time for callable fields (defaults to 0).
    """
    if callable(field):
        values = np.asarray(field(quad.points.reshape(-1, 3), 0.0 if t is None else t))
        values = values.reshape(quad.shape + values.shape[1:])
    else:
        values = np.asarray(field)
    return np.einsum("tq,tq...->...", quad.weights, values)


# --- EXPORT ---

def write_vtk(path, mesh: SurfaceMesh, point_data: Optional[Dict[str, np.ndarray]] = None,
              title: str = "tansurf") -> Path:
    """
    Legacy ASCII VTK POLYDATA. Arrays shaped (V,) become SCALARS, (V, 3) VECTORS.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET POLYDATA",
             f"POINTS {len(mesh.vertices)} double"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in mesh.vertices]
    lines.append(f"POLYGONS {len(mesh.triangles)} {4 * len(mesh.triangles)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    if point_data:
        lines.append(f"POINT_DATA {len(mesh.vertices)}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.shape[0] != len(mesh.vertices):
                raise ValueError(f"{name}: expected {len(mesh.vertices)} vertex values, got {values.shape[0]}")
            if values.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{x:.17g}" for x in values]
            else:
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(f"{x:.17g}" for x in row) for row in values]
    path.write_text("\n".join(lines) + "\n")
    return path
