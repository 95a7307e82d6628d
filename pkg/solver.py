"""
Tansurf Solver Layer
Direct solution of the assembled saddle-point systems, discrete error norms, and
dense estimators for the discrete Korn and inf-sup constants.

Key Logic:
- One block matrix per formulation:
      [ A   B^T  Bl^T  .    C^T ]
      [ B   .    .     c^T  .   ]
      [ Bl  .    .     .    .   ]
      [ .   c    .     .    .   ]
      [ C   .    .     .    .   ]
  (Bl only for the multiplier formulation, C only when Killing fields exist.)
- Loads are made L2-orthogonal to the interpolated Killing fields first; a load
  whose L2 cosine with a Killing field exceeds `killing_tol` is rejected.
- SuperLU factorization plus one step of iterative refinement.
- Korn: smallest eigenvalue of A_TANGENTIAL/(2 mu) against the H1 Gram matrix on
  nodally tangential fields, with and without the Killing constraints.
- Inf-sup: smallest nonzero eigenvalue of B X^-1 B^T against the pressure mass.
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

import assembly
import tancalc
from assembly import FESpaces, SaddleSystem
from errors import InconsistentRhs, SingularSystem, TooLarge
from service_models import ConstantsReport, ErrorNorms, FormVariant, Formulation, PressureKind, SolveReport

logger = logging.getLogger("tansurf.solver")

# --- CONFIG ---
PIVOT_RATIO_FLOOR = 1e-13
RESIDUAL_TOL = 1e-9
DENSE_CAP = 6000
JACOBIAN_CHUNK = 4096
MINRES_RTOL = 1e-10
MINRES_MAXITER = 20000


# ---------------------------------------------------------------------------
# Block matrix
# ---------------------------------------------------------------------------

def saddle_matrix(system: SaddleSystem) -> Tuple[sp.csc_matrix, Dict[str, slice]]:
    """
    Full symmetric block matrix of a system and the unknown ranges per block.
    """
    A, B, c_p = system.A, system.B, system.c_p
    has_lambda = system.B_lambda is not None
    has_killing = system.C_kill.shape[0] > 0
    names = ["velocity", "pressure"] + (["multiplier"] if has_lambda else []) + ["gauge"] + \
            (["killing"] if has_killing else [])

    def block(row, col):
        pairs = {
            ("velocity", "velocity"): A,
            ("velocity", "pressure"): B.T,
            ("pressure", "velocity"): B,
            ("pressure", "gauge"): c_p.T,
            ("gauge", "pressure"): c_p,
        }
        if has_lambda:
            pairs[("velocity", "multiplier")] = system.B_lambda.T
            pairs[("multiplier", "velocity")] = system.B_lambda
        if has_killing:
            pairs[("velocity", "killing")] = system.C_kill.T
            pairs[("killing", "velocity")] = system.C_kill
        return pairs.get((row, col))

    K = sp.bmat([[block(r, c) for c in names] for r in names], format="csc")

    sizes = {"velocity": A.shape[0], "pressure": B.shape[0], "gauge": 1}
    if has_lambda:
        sizes["multiplier"] = system.B_lambda.shape[0]
    if has_killing:
        sizes["killing"] = system.C_kill.shape[0]
    ranges, start = {}, 0
    for name in names:
        ranges[name] = slice(start, start + sizes[name])
        start += sizes[name]
    return K, ranges


def orthogonalize_rhs(rhs: np.ndarray, mass: sp.spmatrix, killing: np.ndarray,
                      killing_tol: float = 0.1) -> Tuple[np.ndarray, float]:
    """
    Removes the Killing components of a load in the discrete L2 sense.

    Returns:
        The corrected load and the relative size of the removed part.

    Raises:
        InconsistentRhs: the load's L2 cosine with a Killing field exceeds killing_tol.
    """
    if killing.shape[1] == 0:
        return rhs, 0.0
    mass_lu = spla.splu(sp.csc_matrix(mass))
    dual = float(np.sqrt(max(rhs @ mass_lu.solve(rhs), 0.0)))
    if dual == 0.0:
        return rhs, 0.0
    MK = mass @ killing
    field_norms = np.sqrt(np.einsum("ik,ik->k", killing, MK))
    cosines = np.abs(rhs @ killing) / (dual * field_norms)
    worst = int(np.argmax(cosines))
    if cosines[worst] > killing_tol:
        raise InconsistentRhs(
            f"compatibility condition violated: the load must satisfy f(v_T) = 0 for every Killing field "
            f"v_T with E_s(v_T) = 0; measured L2 cosine {cosines[worst]:.3g} with Killing field {worst} "
            f"exceeds killing_tol = {killing_tol:g}"
        )
    gram = killing.T @ MK
    alpha = np.linalg.solve(gram, killing.T @ rhs)
    correction = float(np.sqrt(max(alpha @ gram @ alpha, 0.0))) / dual
    return rhs - MK @ alpha, correction


def _factorize(K: sp.csc_matrix):
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SingularSystem(f"sparse factorization failed ({exc}); a gauge or Killing constraint is missing") from exc
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < PIVOT_RATIO_FLOOR * pivots.max():
        raise SingularSystem(f"near-zero pivot {pivots.min():.3e} against {pivots.max():.3e}; "
                             f"a gauge or Killing constraint is missing")
    return lu


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def tangential_h1_norm(values: np.ndarray, grads: np.ndarray, quad) -> float:
    """
    H1 norm of the tangential part P w of a field given by values w (T, Q, 3) and
    normally extended gradients grad w (T, Q, 3, 3):
        grad (P w) = P grad w P - w_N H - n (x) H w.
    """
    w_T = np.einsum("tqij,tqj->tqi", quad.P, values)
    w_N = np.einsum("tqi,tqi->tq", quad.n, values)
    Hw = np.einsum("tqij,tqj->tqi", quad.H, values)
    grad_T = (quad.P @ grads @ quad.P - w_N[..., None, None] * quad.H
              - quad.n[..., :, None] * Hw[..., None, :])
    integrand = np.einsum("tqi,tqi->tq", w_T, w_T) + np.einsum("tqij,tqij->tq", grad_T, grad_T)
    return float(np.sqrt(max(np.sum(quad.weights * integrand), 0.0)))


def u_N_l2(spaces: FESpaces, velocity: np.ndarray) -> float:
    values, _ = assembly.velocity_at_quadrature(spaces, velocity)
    u_N = np.einsum("tqi,tqi->tq", spaces.quad.n, values)
    return float(np.sqrt(np.sum(spaces.quad.weights * u_N ** 2)))


def _exact_gradients(u_exact, points: np.ndarray, t: float) -> np.ndarray:
    parts = [tancalc.jacobian(u_exact, points[i:i + JACOBIAN_CHUNK], t)
             for i in range(0, len(points), JACOBIAN_CHUNK)]
    return np.concatenate(parts)


def error_norms(spaces: FESpaces, velocity: np.ndarray, pressure: Optional[np.ndarray],
                u_exact, p_exact=None, t: float = 0.0) -> ErrorNorms:
    """
    Errors of the tangential velocity (H1, L2) and of the mean-free pressure (L2)
    against exact fields evaluated at quadrature points.
    """
    quad = spaces.quad
    points = quad.points.reshape(-1, 3)
    u_h, grad_h = assembly.velocity_at_quadrature(spaces, velocity)
    u_ex = u_exact(points, t).reshape(u_h.shape)
    grad_ex = _exact_gradients(u_exact, points, t).reshape(grad_h.shape) @ quad.P
    diff, grad_diff = u_h - u_ex, grad_h - grad_ex

    diff_T = np.einsum("tqij,tqj->tqi", quad.P, diff)
    velocity_l2 = float(np.sqrt(np.sum(quad.weights * np.einsum("tqi,tqi->tq", diff_T, diff_T))))
    pressure_l2 = None
    if pressure is not None and p_exact is not None:
        gap = assembly.pressure_at_quadrature(spaces, pressure) - p_exact(points, t).reshape(quad.shape)
        gap = gap - np.sum(quad.weights * gap) / np.sum(quad.weights)
        pressure_l2 = float(np.sqrt(np.sum(quad.weights * gap ** 2)))
    return ErrorNorms(velocity_h1=tangential_h1_norm(diff, grad_diff, quad),
                      velocity_l2=velocity_l2, pressure_l2=pressure_l2)


# ---------------------------------------------------------------------------
# Direct solve
# ---------------------------------------------------------------------------

def solve_saddle(system: SaddleSystem, formulation: Optional[Formulation] = None,
                 killing_tol: float = 0.1) -> SolveReport:
    """
    Solves one assembled formulation with a sparse direct factorization.

    Args:
        system: Assembled blocks and load.
        formulation: Must match the system's formulation when given.
        killing_tol: Largest accepted L2 cosine between the load and a Killing field.

    Returns:
        SolveReport with the ambient velocity, pressure and multiplier attached.

    Raises:
        SingularSystem: factorization breakdown or residual above tolerance.
        InconsistentRhs: load not orthogonal to the Killing fields.
    """
    if formulation is not None and Formulation(formulation) != Formulation(system.formulation):
        raise ValueError(f"system was assembled for {system.formulation}, not {formulation}")
    spaces = system.spaces
    load, correction = orthogonalize_rhs(system.rhs, system.mass, system.killing, killing_tol)

    K, ranges = saddle_matrix(system)
    b = np.zeros(K.shape[0])
    b[ranges["velocity"]] = system.restrict(load)
    lu = _factorize(K)
    x = lu.solve(b)
    x = x + lu.solve(b - K @ x)

    r = b - K @ x
    r_norm = float(np.linalg.norm(r))
    b_norm = float(np.linalg.norm(b))
    residual = r_norm / b_norm if b_norm > 0.0 else r_norm
    backward = np.linalg.norm(r, np.inf) / (spla.norm(K, np.inf) * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf) + 1e-300)
    if backward > RESIDUAL_TOL:
        raise SingularSystem(f"direct solve backward error {backward:.3e} above {RESIDUAL_TOL:g}")

    velocity = system.expand(x[ranges["velocity"]])
    multiplier = x[ranges["multiplier"]] if "multiplier" in ranges else None
    logger.debug("solved %s: %d unknowns, residual %.2e", system.formulation, K.shape[0], residual)
    return SolveReport(
        formulation=system.formulation,
        level=spaces.mesh.level,
        h=spaces.mesh.h,
        velocity_dofs=system.velocity_size,
        pressure_dofs=system.B.shape[0],
        multiplier_dofs=None if multiplier is None else len(multiplier),
        killing_rows=system.C_kill.shape[0],
        residual_norm=residual,
        u_N_l2=u_N_l2(spaces, velocity),
        rhs_killing_correction=correction,
        velocity=velocity,
        pressure=x[ranges["pressure"]],
        multiplier=multiplier,
    )


def minres_cross_check(system: SaddleSystem, direct: SolveReport, killing_tol: float = 0.1) -> Dict[str, float]:
    """
    Re-solves the same block matrix with diagonally preconditioned MINRES and
    reports the velocity difference to the direct solution.
    """
    load, _ = orthogonalize_rhs(system.rhs, system.mass, system.killing, killing_tol)
    K, ranges = saddle_matrix(system)
    b = np.zeros(K.shape[0])
    b[ranges["velocity"]] = system.restrict(load)

    d_u = np.abs(system.A.diagonal())
    d_u[d_u == 0.0] = 1.0
    diag = np.ones(K.shape[0])
    diag[ranges["velocity"]] = d_u
    coupling = {"pressure": system.B, "multiplier": system.B_lambda, "killing": system.C_kill}
    for name, R in coupling.items():
        if name in ranges and R is not None:
            schur = np.asarray(R.multiply(R).multiply(1.0 / d_u[None, :]).sum(axis=1)).ravel()
            schur[schur == 0.0] = 1.0
            diag[ranges[name]] = schur
    gauge_row = system.c_p.toarray().ravel()
    diag[ranges["gauge"]] = max(float(gauge_row @ (gauge_row / diag[ranges["pressure"]])), 1e-300)

    iterations = [0]

    def count(_):
        iterations[0] += 1

    preconditioner = spla.LinearOperator(K.shape, matvec=lambda v: v / diag)
    x, info = spla.minres(K, b, M=preconditioner, rtol=MINRES_RTOL, maxiter=MINRES_MAXITER, callback=count)
    velocity = system.expand(x[ranges["velocity"]])
    scale = max(np.linalg.norm(direct.velocity), 1e-300)
    return {
        "info": float(info),
        "iterations": float(iterations[0]),
        "relative_difference": float(np.linalg.norm(velocity - direct.velocity) / scale),
    }


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

def _constraint_complement(C: np.ndarray) -> Optional[np.ndarray]:
    """Orthonormal basis (n, n - k) of the null space of the k x n constraint rows."""
    k = C.shape[0]
    if k == 0:
        return None
    Q, _ = la.qr(C.T, mode="full")
    return Q[:, k:]


def _smallest_eig(a: np.ndarray, b: np.ndarray, basis: Optional[np.ndarray] = None) -> float:
    if basis is not None:
        a = basis.T @ a @ basis
        b = basis.T @ b @ basis
    a = 0.5 * (a + a.T)
    b = 0.5 * (b + b.T)
    return float(la.eigh(a, b, subset_by_index=[0, 0], eigvals_only=True)[0])


def estimate_korn(spaces: FESpaces, mu: float = 1.0) -> ConstantsReport:
    """
    Discrete Korn constant on nodally tangential fields:
    sqrt(min u^T A u / (2 mu u^T X u)), reported with and without the Killing constraints.

    Raises:
        TooLarge: more than 6000 tangential unknowns.
    """
    frames = assembly.tangential_frames(spaces)
    if frames.shape[1] > DENSE_CAP:
        raise TooLarge(f"Korn eigenproblem of size {frames.shape[1]} exceeds {DENSE_CAP}")
    A = (frames.T @ assembly.assemble_a(spaces, mu, FormVariant.A_TANGENTIAL) @ frames).toarray() / (2.0 * mu)
    X = (frames.T @ assembly.h1_gram(spaces) @ frames).toarray()
    C = (assembly.killing_constraints(spaces) @ frames).toarray()

    unconstrained = _smallest_eig(A, X)
    constrained = _smallest_eig(A, X, _constraint_complement(C)) if C.shape[0] else unconstrained
    logger.debug("korn: constrained %.4g, unconstrained %.4g", constrained, unconstrained)
    return ConstantsReport(korn_h=float(np.sqrt(max(constrained, 0.0))),
                           korn_h_unconstrained=float(np.sqrt(max(unconstrained, 0.0))))


def estimate_infsup(spaces: FESpaces) -> Optional[float]:
    """
    Discrete inf-sup constant beta_h of b(v_T, p) with the H1 velocity norm on
    nodally tangential, Killing-orthogonal fields and the L2 pressure norm.
    Returns None when no pressure survives the mean-zero gauge.

    Raises:
        TooLarge: more than 6000 pressure unknowns.
    """
    n_p = spaces.pressure_dofs
    if PressureKind(spaces.pressure_kind) == PressureKind.CONSTANT or n_p - 1 <= 0:
        return None
    if n_p > DENSE_CAP:
        raise TooLarge(f"inf-sup eigenproblem of size {n_p} exceeds {DENSE_CAP}")
    frames = assembly.tangential_frames(spaces)
    X = (frames.T @ assembly.h1_gram(spaces) @ frames).tocsc()
    B = (assembly.assemble_b(spaces) @ frames).tocsr()
    C = (assembly.killing_constraints(spaces) @ frames).tocsr()
    k = C.shape[0]

    system = sp.bmat([[X, C.T], [C, None]], format="csc") if k else X
    rhs = np.zeros((system.shape[0], n_p))
    rhs[:X.shape[0]] = B.T.toarray()
    Y = spla.splu(system).solve(rhs)[:X.shape[0]]
    S = B @ Y
    M_p = assembly.pressure_mass(spaces).toarray()
    constant_mode = M_p @ np.ones(n_p)
    theta = _smallest_eig(np.asarray(S), M_p, _constraint_complement(constant_mode[None, :]))
    return float(np.sqrt(max(theta, 0.0)))


def estimate_constants(spaces: FESpaces, mu: float = 1.0) -> ConstantsReport:
    report = estimate_korn(spaces, mu)
    return report.model_copy(update={"infsup_h": estimate_infsup(spaces)})
