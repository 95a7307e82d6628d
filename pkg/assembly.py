"""
Tansurf Assembly Layer
Finite-element spaces and every bilinear/linear form of the surface Stokes problems.

Key Logic:
- Velocity: quadratic Lagrange on the lifted mesh, 3 ambient components per node
  (dof = 3 * node + component). Nodes are the vertices followed by the lifted edge
  midpoints. Pressure and multiplier: linear Lagrange on the vertices.
- Surface gradients of lifted basis functions: J (J^T J)^-1 grad_xi phi, with J the
  lifted Jacobian cached by the quadrature.
- Strain of a basis function u = phi_a e_c:
    E_s(u)    = sym(P[:, c] (x) grad phi_a)
    E_s(P u)  = E_s(u) - phi_a n_c H
- Local blocks are symmetrized, triplets merged in (row, col) order, and the global
  block is averaged with its transpose so A = A^T holds exactly.

Key Configuration:
- TANSURF_THREADS: worker threads for the element loop of `assemble_a` (default 1).
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict

import geometry
from errors import InvalidTau
from mesh import LiftedQuadrature, SurfaceMesh, build_quadrature
from service_models import FormVariant, Formulation, PressureKind, RhsPairing, StrainRoute

logger = logging.getLogger("tansurf.assembly")

# --- CONFIG ---
CHUNK_ELEMENTS = 1024
VARIANT_FOR = {
    Formulation.TANGENTIAL: FormVariant.A_TANGENTIAL,
    Formulation.MULTIPLIER: FormVariant.A_FULL,
    Formulation.AUGMENTED_TANGENTIAL: FormVariant.A_TAU,
    Formulation.AUGMENTED_FULL: FormVariant.A_HAT_TAU,
}
PAIRING_FOR = {
    Formulation.TANGENTIAL: RhsPairing.TANGENTIAL,
    Formulation.MULTIPLIER: RhsPairing.FULL,
    Formulation.AUGMENTED_TANGENTIAL: RhsPairing.TANGENTIAL,
    Formulation.AUGMENTED_FULL: RhsPairing.TANGENTIAL,
}

_DLAMBDA = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
_EDGE_PAIRS = [(0, 1), (1, 2), (2, 0)]


def _threads() -> int:
    return max(1, int(os.getenv("TANSURF_THREADS", "1")))


# ---------------------------------------------------------------------------
# Reference basis
# ---------------------------------------------------------------------------

def p2_basis(bary: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quadratic basis on the reference triangle at barycentric points (Q, 3).

    Returns:
        Values (Q, 6) and reference gradients (Q, 6, 2). Local order: vertices
        0, 1, 2, then edges (0,1), (1,2), (2,0).
    """
    lam = bary
    values = [lam[:, i] * (2.0 * lam[:, i] - 1.0) for i in range(3)]
    grads = [(4.0 * lam[:, i] - 1.0)[:, None] * _DLAMBDA[i][None, :] for i in range(3)]
    for a, b in _EDGE_PAIRS:
        values.append(4.0 * lam[:, a] * lam[:, b])
        grads.append(4.0 * (lam[:, a][:, None] * _DLAMBDA[b][None, :] + lam[:, b][:, None] * _DLAMBDA[a][None, :]))
    return np.stack(values, axis=1), np.stack(grads, axis=1)


def _surface_gradients(quad: LiftedQuadrature, ref_grads: np.ndarray) -> np.ndarray:
    """(T, Q, nbasis, 3) tangential gradients of lifted reference functions."""
    if ref_grads.ndim == 2:
        return np.einsum("tqir,tqrs,as->tqai", quad.jacobian, quad.metric_inv, ref_grads)
    return np.einsum("tqir,tqrs,qas->tqai", quad.jacobian, quad.metric_inv, ref_grads)


# ---------------------------------------------------------------------------
# Spaces
# ---------------------------------------------------------------------------

class FESpaces(BaseModel):
    """
    P2 velocity (3 components), P1 or constant pressure, P1 multiplier, with the
    per-element tabulations every form needs.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, use_enum_values=True)

    mesh: SurfaceMesh
    quad: LiftedQuadrature
    pressure_kind: PressureKind = PressureKind.LINEAR
    nodes: np.ndarray            # (N, 3) vertices then lifted edge midpoints
    elem_nodes: np.ndarray       # (T, 6)
    pressure_elem: np.ndarray    # (T, 3) pressure dof per local vertex
    phi: np.ndarray              # (Q, 6)
    grad_phi: np.ndarray         # (T, Q, 6, 3)
    psi: np.ndarray              # (Q, 3) linear basis = barycentrics
    grad_psi: np.ndarray         # (T, Q, 3, 3)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def velocity_dofs(self) -> int:
        return 3 * len(self.nodes)

    @property
    def pressure_dofs(self) -> int:
        return int(self.pressure_elem.max()) + 1

    @property
    def multiplier_dofs(self) -> int:
        return len(self.mesh.vertices)

    @property
    def velocity_elem(self) -> np.ndarray:
        """(T, 18) global velocity dofs in local order (node-major, component-minor)."""
        return (3 * self.elem_nodes[:, :, None] + np.arange(3)[None, None, :]).reshape(len(self.elem_nodes), 18)


def build_spaces(mesh: SurfaceMesh, quad: Optional[LiftedQuadrature] = None,
                 pressure_kind: PressureKind = PressureKind.LINEAR) -> FESpaces:
    quad = quad if quad is not None else build_quadrature(mesh)
    edges, tri_edges = mesh.edge_table()
    midpoints = geometry.closest_point(mesh.surface, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]),
                                       mesh.time)
    V = len(mesh.vertices)
    elem_nodes = np.column_stack([mesh.triangles, V + tri_edges])
    phi, dphi = p2_basis(quad.bary)
    if PressureKind(pressure_kind) == PressureKind.CONSTANT:
        pressure_elem = np.zeros_like(mesh.triangles)
    else:
        pressure_elem = mesh.triangles.copy()
    spaces = FESpaces(
        mesh=mesh,
        quad=quad,
        pressure_kind=pressure_kind,
        nodes=np.vstack([mesh.vertices, midpoints]),
        elem_nodes=elem_nodes,
        pressure_elem=pressure_elem,
        phi=phi,
        grad_phi=_surface_gradients(quad, dphi),
        psi=quad.bary,
        grad_psi=_surface_gradients(quad, _DLAMBDA),
    )
    logger.debug("spaces: %d velocity, %d pressure, %d multiplier dofs",
                 spaces.velocity_dofs, spaces.pressure_dofs, spaces.multiplier_dofs)
    return spaces


# ---------------------------------------------------------------------------
# Scatter helpers
# ---------------------------------------------------------------------------

def _triplets(row_dofs: np.ndarray, col_dofs: np.ndarray, local: np.ndarray):
    rows = np.broadcast_to(row_dofs[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(col_dofs[:, None, :], local.shape).ravel()
    return rows, cols, local.ravel()


def _compress(parts: List[Tuple[np.ndarray, np.ndarray, np.ndarray]], shape, symmetric: bool = False) -> sp.csr_matrix:
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    order = np.lexsort((cols, rows))
    M = sp.coo_matrix((vals[order], (rows[order], cols[order])), shape=shape).tocsr()
    if symmetric:
        M = ((M + M.T) * 0.5).tocsr()
    M.sum_duplicates()
    return M


def _symmetric_block(dofs: np.ndarray, local: np.ndarray, size: int) -> sp.csr_matrix:
    local = 0.5 * (local + np.swapaxes(local, 1, 2))
    return _compress([_triplets(dofs, dofs, local)], (size, size), symmetric=True)


# ---------------------------------------------------------------------------
# Viscous forms
# ---------------------------------------------------------------------------

def _strain_parts(spaces: FESpaces, sl: slice):
    """Per-basis strain pieces on an element chunk, shaped (t, Q, 18, 3, 3) or (t, Q, 18)."""
    q = spaces.quad
    P, n, H, G = q.P[sl], q.n[sl], q.H[sl], spaces.grad_phi[sl]
    t, Q = P.shape[:2]
    outer = np.einsum("tqic,tqaj->tqacij", P, G)
    direct = 0.5 * (outer + np.swapaxes(outer, -1, -2))
    normal_coeff = spaces.phi[None, :, :, None] * n[:, :, None, :]        # phi_a n_c, (t, Q, 6, 3)
    bending = normal_coeff[..., None, None] * H[:, :, None, None, :, :]
    tangential = direct - bending
    return (direct.reshape(t, Q, 18, 3, 3), tangential.reshape(t, Q, 18, 3, 3),
            normal_coeff.reshape(t, Q, 18), H)


def _local_a(spaces: FESpaces, sl: slice, mu: float, variant: FormVariant, tau: float, route: StrainRoute):
    w = spaces.quad.weights[sl]
    direct, tangential, normal_coeff, H = _strain_parts(spaces, sl)
    if variant in (FormVariant.A_TANGENTIAL, FormVariant.A_TAU):
        local = np.einsum("tq,tqxij,tqyij->txy", w, tangential, tangential)
    elif route == StrainRoute.DIRECT:
        local = np.einsum("tq,tqxij,tqyij->txy", w, direct, direct)
    else:
        # (E_s(u_T) + u_N H) : (E_s(v_T) + v_N H), expanded
        h_t = np.einsum("tqij,tqxij->tqx", H, tangential)
        h_h = np.einsum("tqij,tqij->tq", H, H)
        local = (np.einsum("tq,tqxij,tqyij->txy", w, tangential, tangential)
                 + np.einsum("tq,tqx,tqy->txy", w, normal_coeff, h_t)
                 + np.einsum("tq,tqx,tqy->txy", w, h_t, normal_coeff)
                 + np.einsum("tq,tqx,tqy->txy", w * h_h, normal_coeff, normal_coeff))
    local = 2.0 * mu * local
    if variant in (FormVariant.A_TAU, FormVariant.A_HAT_TAU):
        local = local + tau * np.einsum("tq,tqx,tqy->txy", w, normal_coeff, normal_coeff)
    dofs = spaces.velocity_elem[sl]
    local = 0.5 * (local + np.swapaxes(local, 1, 2))
    return _triplets(dofs, dofs, local)


def assemble_a(spaces: FESpaces, mu: float, variant: FormVariant, tau: float = 0.0,
               route: StrainRoute = StrainRoute.FACTORED) -> sp.csr_matrix:
    """
    Viscous block for one form variant.

    Args:
        spaces: FE spaces with lifted quadrature.
        mu: Viscosity.
        variant: A_TANGENTIAL  2mu (E_s(Pu), E_s(Pv));
                 A_FULL        2mu (E_s(u), E_s(v));
                 A_TAU         A_TANGENTIAL + tau (u.n, v.n);
                 A_HAT_TAU     A_FULL + tau (u.n, v.n).
        tau: Penalty parameter, required > 0 for the augmented variants.
        route: How A_FULL strains are formed (factored E_s(u_T) + u_N H, or direct).

    Raises:
        InvalidTau: tau <= 0 for A_TAU / A_HAT_TAU.
    """
    variant = FormVariant(variant)
    route = StrainRoute(route)
    if variant in (FormVariant.A_TAU, FormVariant.A_HAT_TAU) and tau <= 0.0:
        raise InvalidTau(f"{variant.value} needs tau > 0, got {tau}")
    return _assemble_velocity_block(spaces, lambda sl: _local_a(spaces, sl, mu, variant, tau, route), symmetric=True)


def _assemble_velocity_block(spaces: FESpaces, local_fn, symmetric: bool) -> sp.csr_matrix:
    T = len(spaces.elem_nodes)
    chunks = [slice(start, min(start + CHUNK_ELEMENTS, T)) for start in range(0, T, CHUNK_ELEMENTS)]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(local_fn, chunks))
    n = spaces.velocity_dofs
    return _compress(parts, (n, n), symmetric=symmetric)


def _local_normal_coupling(spaces: FESpaces, sl: slice, mu: float):
    w = spaces.quad.weights[sl]
    _, tangential, normal_coeff, H = _strain_parts(spaces, sl)
    h_t = np.einsum("tqij,tqxij->tqx", H, tangential)
    local = 2.0 * mu * np.einsum("tq,tqx,tqy->txy", w, normal_coeff, h_t)
    dofs = spaces.velocity_elem[sl]
    return _triplets(dofs, dofs, local)


def assemble_normal_coupling(spaces: FESpaces, mu: float) -> sp.csr_matrix:
    """
    Nonsymmetric block C with v^T C u = 2 mu (v.n, H : E_s(P u)), normal test
    against tangential trial. It splits the full form as
        A_FULL = A_TANGENTIAL + C + C^T + 2 mu (|H|^2 u.n, v.n).
    """
    return _assemble_velocity_block(spaces, lambda sl: _local_normal_coupling(spaces, sl, mu), symmetric=False)


def assemble_normal_mass(spaces: FESpaces) -> sp.csr_matrix:
    """(u.n, v.n): the penalty block without tau."""
    q = spaces.quad
    coeff = (spaces.phi[None, :, :, None] * q.n[:, :, None, :]).reshape(*q.shape, 18)
    local = np.einsum("tq,tqx,tqy->txy", q.weights, coeff, coeff)
    return _symmetric_block(spaces.velocity_elem, local, spaces.velocity_dofs)


# ---------------------------------------------------------------------------
# Coupling forms
# ---------------------------------------------------------------------------

def assemble_b(spaces: FESpaces) -> sp.csr_matrix:
    """b(v, p) = int (P v) . grad p, shape (pressure dofs, velocity dofs)."""
    q = spaces.quad
    local = np.einsum("tq,tqkc,qa->tkac", q.weights, spaces.grad_psi, spaces.phi).reshape(len(q.weights), 3, 18)
    return _compress([_triplets(spaces.pressure_elem, spaces.velocity_elem, local)],
                     (spaces.pressure_dofs, spaces.velocity_dofs))


def assemble_btilde(spaces: FESpaces) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Pressure block B and the multiplier block B_lambda = int lambda (v . n)."""
    q = spaces.quad
    local = np.einsum("tq,qk,qa,tqc->tkac", q.weights, spaces.psi, spaces.phi, q.n).reshape(len(q.weights), 3, 18)
    B_lambda = _compress([_triplets(spaces.mesh.triangles, spaces.velocity_elem, local)],
                         (spaces.multiplier_dofs, spaces.velocity_dofs))
    return assemble_b(spaces), B_lambda


# ---------------------------------------------------------------------------
# Mass and norm matrices
# ---------------------------------------------------------------------------

def scalar_p2_mass(spaces: FESpaces) -> sp.csr_matrix:
    q = spaces.quad
    local = np.einsum("tq,qa,qb->tab", q.weights, spaces.phi, spaces.phi)
    return _symmetric_block(spaces.elem_nodes, local, spaces.node_count)


def scalar_p2_stiffness(spaces: FESpaces) -> sp.csr_matrix:
    q = spaces.quad
    local = np.einsum("tq,tqai,tqbi->tab", q.weights, spaces.grad_phi, spaces.grad_phi)
    return _symmetric_block(spaces.elem_nodes, local, spaces.node_count)


def velocity_mass(spaces: FESpaces) -> sp.csr_matrix:
    return sp.kron(scalar_p2_mass(spaces), sp.identity(3), format="csr")


def h1_gram(spaces: FESpaces) -> sp.csr_matrix:
    """Gram matrix of int |u|^2 + |grad u^e|^2 with the normally extended gradient grad u P."""
    return sp.kron(scalar_p2_mass(spaces) + scalar_p2_stiffness(spaces), sp.identity(3), format="csr")


def pressure_mass(spaces: FESpaces) -> sp.csr_matrix:
    q = spaces.quad
    local = np.einsum("tq,qk,ql->tkl", q.weights, spaces.psi, spaces.psi)
    return _symmetric_block(spaces.pressure_elem, local, spaces.pressure_dofs)


def pressure_mean_row(spaces: FESpaces) -> sp.csr_matrix:
    """1 x pressure-dofs row of int psi_k: the gauge int p = 0."""
    q = spaces.quad
    vals = np.einsum("tq,qk->tk", q.weights, spaces.psi)
    row = np.bincount(spaces.pressure_elem.ravel(), weights=vals.ravel(), minlength=spaces.pressure_dofs)
    return sp.csr_matrix(row[None, :])


# ---------------------------------------------------------------------------
# Loads and interpolation
# ---------------------------------------------------------------------------

FieldLike = Union[Callable[[np.ndarray, float], np.ndarray], np.ndarray]


def _values_at_quadrature(spaces: FESpaces, f: FieldLike, t: float) -> np.ndarray:
    q = spaces.quad
    if callable(f):
        values = np.asarray(f(q.points.reshape(-1, 3), t))
        return values.reshape(q.shape + values.shape[1:])
    return np.asarray(f)


def assemble_rhs(spaces: FESpaces, f: Optional[FieldLike], pairing: RhsPairing = RhsPairing.TANGENTIAL,
                 t: float = 0.0) -> np.ndarray:
    """
    Load vector int f . (P v) (tangential pairing) or int f . v (full pairing).

    Args:
        f: Vector field f(points, t), values shaped (T, Q, 3), or None for zero load.
    """
    n = spaces.velocity_dofs
    if f is None:
        return np.zeros(n)
    q = spaces.quad
    values = _values_at_quadrature(spaces, f, t)
    if RhsPairing(pairing) == RhsPairing.TANGENTIAL:
        values = np.einsum("tqij,tqj->tqi", q.P, values)
    local = np.einsum("tq,qa,tqc->tac", q.weights, spaces.phi, values).reshape(len(q.weights), 18)
    return np.bincount(spaces.velocity_elem.ravel(), weights=local.ravel(), minlength=n)


def interpolate(spaces: FESpaces, u: Callable[[np.ndarray, float], np.ndarray], t: float = 0.0) -> np.ndarray:
    """Nodal interpolant of a vector field, flattened to (3N,)."""
    return np.asarray(u(spaces.nodes, t), dtype=float).reshape(-1)


def interpolate_pressure(spaces: FESpaces, p: Callable[[np.ndarray, float], np.ndarray], t: float = 0.0) -> np.ndarray:
    if PressureKind(spaces.pressure_kind) == PressureKind.CONSTANT:
        area = float(spaces.quad.weights.sum())
        return np.array([float(np.sum(spaces.quad.weights * _values_at_quadrature(spaces, p, t))) / area])
    return np.asarray(p(spaces.mesh.vertices, t), dtype=float)


def velocity_at_quadrature(spaces: FESpaces, coeffs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discrete velocity and its normally extended gradient at quadrature points.

    Returns:
        u (T, Q, 3) and grad u (T, Q, 3, 3), rows indexed by component.
    """
    U = coeffs.reshape(-1, 3)[spaces.elem_nodes]            # (T, 6, 3)
    values = np.einsum("qa,tac->tqc", spaces.phi, U)
    grads = np.einsum("tac,tqaj->tqcj", U, spaces.grad_phi)
    return values, grads


def pressure_at_quadrature(spaces: FESpaces, coeffs: np.ndarray) -> np.ndarray:
    return np.einsum("qk,tk->tq", spaces.psi, coeffs[spaces.pressure_elem])


# ---------------------------------------------------------------------------
# Killing fields and tangential frames
# ---------------------------------------------------------------------------

def killing_fields(spaces: FESpaces) -> np.ndarray:
    """Interpolated rotations that preserve the surface, shape (3N, k)."""
    surface = spaces.mesh.surface
    y = spaces.nodes - np.asarray(surface.center)
    columns = [np.cross(axis, y).reshape(-1) for axis in geometry.killing_axes(surface)]
    if not columns:
        return np.zeros((spaces.velocity_dofs, 0))
    return np.column_stack(columns)


def killing_constraints(spaces: FESpaces, mass: Optional[sp.csr_matrix] = None) -> sp.csr_matrix:
    """Rows (M_u K_i)^T: velocity mass pairings with each interpolated Killing field."""
    K = killing_fields(spaces)
    M = mass if mass is not None else velocity_mass(spaces)
    return sp.csr_matrix((M @ K).T)


def tangential_frames(spaces: FESpaces) -> sp.csr_matrix:
    """
    T (3N x 2N): orthonormal tangent pair per node, so u = T u_hat is nodally tangential.
    """
    n = geometry.evaluate(spaces.mesh.surface, spaces.nodes, spaces.mesh.time).n
    helper = np.eye(3)[np.argmin(np.abs(n), axis=1)]
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1)[:, None]
    t2 = np.cross(n, t1)
    N = len(n)
    rows = (3 * np.arange(N)[:, None, None] + np.arange(3)[None, :, None]).repeat(2, axis=2)
    cols = (2 * np.arange(N)[:, None, None] + np.arange(2)[None, None, :]).repeat(3, axis=1)
    vals = np.stack([t1, t2], axis=-1)
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * N, 2 * N))


# ---------------------------------------------------------------------------
# Saddle system
# ---------------------------------------------------------------------------

class SaddleSystem(BaseModel):
    """
    Blocks of one formulation. For TANGENTIAL the velocity unknowns are the
    2N frame coordinates and `frames` maps them back to 3N ambient dofs.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, use_enum_values=True)

    formulation: Formulation
    spaces: FESpaces
    A: sp.csr_matrix
    B: sp.csr_matrix
    B_lambda: Optional[sp.csr_matrix] = None
    c_p: sp.csr_matrix
    C_kill: sp.csr_matrix
    killing: np.ndarray          # (3N, k) interpolated Killing fields
    mass: sp.csr_matrix          # velocity mass in ambient dofs
    rhs: np.ndarray              # ambient velocity load (3N,)
    frames: Optional[sp.csr_matrix] = None
    mu: float
    tau: float = 0.0
    rho: float = 1.0

    @property
    def velocity_size(self) -> int:
        return self.A.shape[0]

    def restrict(self, vector: np.ndarray) -> np.ndarray:
        return self.frames.T @ vector if self.frames is not None else vector

    def expand(self, vector: np.ndarray) -> np.ndarray:
        return self.frames @ vector if self.frames is not None else vector


def assemble_system(spaces: FESpaces, formulation: Formulation, mu: float, tau: float = 0.0,
                    f: Optional[FieldLike] = None, rho: float = 1.0,
                    pairing: Optional[RhsPairing] = None, t: float = 0.0) -> SaddleSystem:
    """
    Assembles every block of one formulation.

    Args:
        spaces: FE spaces.
        formulation: TANGENTIAL (diagnostic, frame-restricted), MULTIPLIER,
            AUGMENTED_TANGENTIAL or AUGMENTED_FULL.
        mu: Viscosity.
        tau: Penalty parameter of the augmented formulations.
        f: Load field or quadrature values.
        pairing: Override of the formulation's default load pairing.
    """
    formulation = Formulation(formulation)
    variant = VARIANT_FOR[formulation]
    A = assemble_a(spaces, mu, variant, tau)
    B_lambda = None
    if formulation == Formulation.MULTIPLIER:
        B, B_lambda = assemble_btilde(spaces)
    else:
        B = assemble_b(spaces)
    mass = velocity_mass(spaces)
    killing = killing_fields(spaces)
    C_kill = sp.csr_matrix((mass @ killing).T)
    rhs = assemble_rhs(spaces, f, pairing or PAIRING_FOR[formulation], t)

    frames = None
    if formulation == Formulation.TANGENTIAL:
        frames = tangential_frames(spaces)
        A = (frames.T @ A @ frames).tocsr()
        A = ((A + A.T) * 0.5).tocsr()
        B = (B @ frames).tocsr()
        C_kill = (C_kill @ frames).tocsr()

    logger.debug("system %s: velocity %d, pressure %d, killing rows %d",
                 formulation.value, A.shape[0], B.shape[0], C_kill.shape[0])
    return SaddleSystem(
        formulation=formulation, spaces=spaces, A=A, B=B, B_lambda=B_lambda,
        c_p=pressure_mean_row(spaces), C_kill=C_kill, killing=killing, mass=mass, rhs=rhs,
        frames=frames, mu=mu, tau=tau, rho=rho,
    )


def export_triplets(matrix: sp.spmatrix, path) -> Path:
    """Writes `row col value` lines, sorted by (row, col)."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([coo.row[order], coo.col[order], coo.data[order]]), fmt=["%d", "%d", "%.17g"])
    return path
