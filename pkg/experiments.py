"""
Tansurf Experiment Runner
The `tansurf` command line: identity suites, manufactured-solution solves,
convergence studies, tau sweeps and discrete constant estimates, each written
out as report.json plus plot-ready CSV tables.

Key Logic:
- Manufactured cases take an exact tangential velocity and pressure and build
  the load with the finite-difference oracle: f = -2 mu P div E_s(u) + grad pi.
- The default case is the surface curl of psi = y1 y2 y3 with pi = y1, made
  L2-orthogonal to the Killing fields and mean-free by quadrature on a fine mesh.
  The load is then checked on the same mesh: its pairing with every Killing
  field must stay below 1e-8, or the case raises InconsistentRhs.
- The tau sweep reports the consistency gap between the augmented-full and
  augmented-tangential solutions with the reference's own discrete normal
  residue taken out; the raw difference is kept next to it.
- Each sub-experiment (identity, level, tau) runs in its own try/except; a
  failure is printed, recorded in the report and the run continues.
- report.json = {"payload": ..., "metadata": ...}; the payload is deterministic
  for a given config, timestamps live in the metadata.

Key Configuration:
- TANSURF_THREADS: worker threads for element assembly and the tau sweep.
- TANSURF_LOG_LEVEL: logging level (default INFO).
- TANSURF_OUT_DIR: output directory when --out is not given (default ./tansurf_out).
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError

import assembly
import geometry
import identities
import mesh
import solver
import tancalc
from errors import BelowThreshold, ConfigError, HypothesisViolated, InconsistentRhs, TansurfError
from service_models import (
    Arity,
    Command,
    ExperimentConfig,
    Formulation,
    IdentityCheckReport,
    IdentityId,
    IdentityRequest,
    LevelSetSurface,
    ManufacturedFamily,
    Provenance,
    RunMetadata,
    SolveReport,
    SurfaceKind,
    TauSweepReport,
    TauSweepRow,
)
from tancalc import AmbientField

logger = logging.getLogger("tansurf.experiments")

# --- CONFIG ---
RHS_CHUNK = 4096
CASE_MESH_LEVEL = {SurfaceKind.SPHERE: 3, SurfaceKind.ELLIPSOID: 3, SurfaceKind.TORUS: 1}
CASE_KILLING_TOL = 1e-8
MIN_ORDER = 1.8
MIN_NORMAL_RATIO = 2.0
TAU_SLOPE_MIN = -0.65
TAU_SLOPE_MAX = -0.35
CONSTANT_FLOOR = 0.05
CONSTANT_VARIATION = 0.2
COLLAPSE_RATIO = 0.1
COLLAPSE_MIN_LEVEL = 3
DEFAULT_OUT_DIR = "tansurf_out"

AUGMENTED = {Formulation.AUGMENTED_TANGENTIAL, Formulation.AUGMENTED_FULL}


def _threads() -> int:
    return max(1, int(os.getenv("TANSURF_THREADS", "1")))


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------

class ManufacturedCase(BaseModel):
    """
    Exact solution and oracle-generated load of one manufactured Stokes problem.
    Cases without an exact solution (a raw load) carry zero exact fields.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, use_enum_values=True)

    family: ManufacturedFamily
    surface: LevelSetSurface
    mu: float
    u_exact: AmbientField
    pi_exact: AmbientField
    f: AmbientField
    has_exact_solution: bool = True
    killing_correction: float = 0.0


def _zero_vector(surface: LevelSetSurface) -> AmbientField:
    return AmbientField(arity=Arity.VECTOR3, fn=lambda y, t: np.zeros(3), surface=surface, name="0")


def _zero_scalar(surface: LevelSetSurface) -> AmbientField:
    return AmbientField(arity=Arity.SCALAR, fn=lambda y, t: 0.0, surface=surface, name="0")


def _product_gradient(y: np.ndarray) -> np.ndarray:
    return np.column_stack([y[:, 1] * y[:, 2], y[:, 0] * y[:, 2], y[:, 0] * y[:, 1]])


def manufactured_rhs(surface: LevelSetSurface, u_exact: AmbientField, pi_exact: AmbientField,
                     mu: float = 1.0) -> AmbientField:
    """
    Load field of the stationary surface Stokes problem with exact solution
    (u_exact, pi_exact), evaluated by the nested finite-difference oracle in
    chunks of 4096 points.
    """
    def fn(y, t):
        parts = [tancalc.stokes_residual(u_exact, pi_exact, y[i:i + RHS_CHUNK], t, mu)
                 for i in range(0, len(y), RHS_CHUNK)]
        return np.concatenate(parts) if parts else np.zeros((0, 3))

    return AmbientField(arity=Arity.VECTOR3, fn=fn, surface=surface, name=f"f[{u_exact.name}, {pi_exact.name}]")


def _case_quadrature(surface: LevelSetSurface) -> mesh.LiftedQuadrature:
    return mesh.build_quadrature(mesh.mesh_for_surface(surface, CASE_MESH_LEVEL[SurfaceKind(surface.kind)]))


def _killing_values(surface: LevelSetSurface, quad: mesh.LiftedQuadrature):
    """Untouched rotations preserving the surface and their values at the quadrature points, (T, Q, 3, k)."""
    rotations = [identities.rotation_field(surface, axis, tangential=False) for axis in geometry.killing_axes(surface)]
    if not rotations:
        return rotations, np.zeros(quad.shape + (3, 0))
    points = quad.points.reshape(-1, 3)
    K = np.stack([r(points) for r in rotations], axis=-1).reshape(quad.shape + (3, len(rotations)))
    return rotations, K


def _relative_pairings(quad: mesh.LiftedQuadrature, values: np.ndarray, K: np.ndarray) -> np.ndarray:
    f_norm = np.sqrt(np.einsum("tq,tqc,tqc->", quad.weights, values, values))
    k_norms = np.sqrt(np.einsum("tq,tqci,tqci->i", quad.weights, K, K))
    pairing = np.abs(np.einsum("tq,tqc,tqci->i", quad.weights, values, K))
    return pairing / np.maximum(f_norm * k_norms, 1e-300)


def killing_pairings(surface: LevelSetSurface, f: AmbientField,
                     quad: Optional[mesh.LiftedQuadrature] = None) -> np.ndarray:
    """|(f, k_i)| / (||f|| ||k_i||) for every Killing field k_i, by quadrature on the case mesh."""
    quad = quad if quad is not None else _case_quadrature(surface)
    _, K = _killing_values(surface, quad)
    if K.shape[-1] == 0:
        return np.zeros(0)
    values = f(quad.points.reshape(-1, 3)).reshape(quad.shape + (3,))
    return _relative_pairings(quad, values, K)


def _killing_free(quad: mesh.LiftedQuadrature, u: AmbientField, pi: AmbientField):
    """Subtracts the L2 Killing components of u and the mean of pi, both by fine-mesh quadrature."""
    surface = u.surface
    area = float(quad.weights.sum())
    mean = float(mesh.integrate(quad, pi)) / area
    rotations, K = _killing_values(surface, quad)
    alpha = np.zeros(len(rotations))
    if rotations:
        gram = np.einsum("tq,tqci,tqcj->ij", quad.weights, K, K)
        pairing = np.einsum("tq,tqc,tqci->i", quad.weights, u(quad.points.reshape(-1, 3)).reshape(quad.shape + (3,)), K)
        alpha = np.linalg.solve(gram, pairing)
    logger.debug("manufactured case: Killing coefficients %s, pressure mean %.3e", np.round(alpha, 14), mean)

    def velocity(y, t):
        out = u(y, t)
        for a, r in zip(alpha, rotations):
            out = out - a * r(y, t)
        return out

    u_free = AmbientField(arity=Arity.VECTOR3, fn=velocity, surface=surface, name=u.name)
    pi_free = AmbientField(arity=Arity.SCALAR, fn=lambda y, t: pi(y, t) - mean, surface=surface, name=pi.name)
    return u_free, pi_free


def _compatible_load(quad: mesh.LiftedQuadrature, f: AmbientField):
    """
    Removes the finite-difference and quadrature residue of f along the Killing
    fields, then checks that every pairing (f, k_i) vanishes.

    Returns:
        The corrected load and the relative size of the removed part.

    Raises:
        InconsistentRhs: a pairing is still above CASE_KILLING_TOL.
    """
    surface = f.surface
    rotations, K = _killing_values(surface, quad)
    if not rotations:
        return f, 0.0
    values = f(quad.points.reshape(-1, 3)).reshape(quad.shape + (3,))
    gram = np.einsum("tq,tqci,tqcj->ij", quad.weights, K, K)
    beta = np.linalg.solve(gram, np.einsum("tq,tqc,tqci->i", quad.weights, values, K))
    corrected = values - np.einsum("tqci,i->tqc", K, beta)
    residual = _relative_pairings(quad, corrected, K)
    if not np.all(residual <= CASE_KILLING_TOL):
        raise InconsistentRhs(
            f"manufactured load violates the compatibility condition f(v_T) = 0 for E_s(v_T) = 0: "
            f"relative pairing {np.nanmax(residual):.3g} exceeds {CASE_KILLING_TOL:g}"
        )
    f_norm = float(np.sqrt(np.einsum("tq,tqc,tqc->", quad.weights, values, values)))
    removed = float(np.sqrt(max(beta @ gram @ beta, 0.0))) / f_norm if f_norm > 0.0 else 0.0
    logger.debug("manufactured load: removed Killing part %.3e, residual pairing %.3e", removed, residual.max())

    def fn(y, t):
        out = f(y, t)
        for b, r in zip(beta, rotations):
            out = out - b * r(y, t)
        return out

    return AmbientField(arity=Arity.VECTOR3, fn=fn, surface=surface, name=f.name), removed


def manufactured_case(surface: LevelSetSurface, family: ManufacturedFamily = ManufacturedFamily.CURL_XYZ,
                      mu: float = 1.0) -> ManufacturedCase:
    """
    Builds one of the shipped manufactured problems.

    Families:
        curl-xyz:      u = n x grad(y1 y2 y3), pi = y1 (Killing-free, mean-free).
        pressure-only: u = 0, pi = y3, so f = P e3.
        killing:       u = a rotation preserving the surface, pi = 0, so f ~ 0.
        killing-load:  the raw rotation as load; rejected by the solver.

    Every family with an exact solution has its load checked against the
    Killing fields; the removed residue is kept in `killing_correction`.

    Raises:
        HypothesisViolated: a Killing family on a surface without Killing fields.
        InconsistentRhs: the load still pairs with a Killing field after correction.
    """
    family = ManufacturedFamily(family)
    axes = geometry.killing_axes(surface)
    if family in (ManufacturedFamily.KILLING, ManufacturedFamily.KILLING_LOAD) and not axes:
        raise HypothesisViolated(f"{surface.kind} with axes {surface.axes} has no Killing fields")

    if family == ManufacturedFamily.KILLING_LOAD:
        load = identities.rotation_field(surface, axes[-1], tangential=False)
        return ManufacturedCase(family=family, surface=surface, mu=mu, u_exact=_zero_vector(surface),
                                pi_exact=_zero_scalar(surface), f=load, has_exact_solution=False)

    quad = _case_quadrature(surface) if axes or family == ManufacturedFamily.CURL_XYZ else None
    if family == ManufacturedFamily.CURL_XYZ:
        psi = identities.scalar_field(surface, lambda y: y[:, 0] * y[:, 1] * y[:, 2], "y1y2y3")
        c = np.asarray(surface.center)
        u = tancalc.surface_curl(psi, gradient=lambda y, t: _product_gradient(y - c))
        pi = identities.scalar_field(surface, lambda y: y[:, 0], "y1")
        u, pi = _killing_free(quad, u, pi)
    elif family == ManufacturedFamily.PRESSURE_ONLY:
        u = _zero_vector(surface)
        pi = identities.scalar_field(surface, lambda y: y[:, 2], "y3")
    else:
        u = identities.rotation_field(surface, axes[-1], tangential=False)
        pi = _zero_scalar(surface)

    f, correction = manufactured_rhs(surface, u, pi, mu), 0.0
    if axes:
        f, correction = _compatible_load(quad, f)
    return ManufacturedCase(family=family, surface=surface, mu=mu, u_exact=u, pi_exact=pi, f=f,
                            killing_correction=correction)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

class CommandResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    payload: Dict[str, Any]
    tables: Dict[str, pd.DataFrame] = {}
    passed: bool = True


def _failure(label: str, exc: Exception) -> Dict[str, str]:
    print(f"   ❌ {label}: {type(exc).__name__}: {exc}")
    return {"item": label, "error": type(exc).__name__, "message": str(exc)}


def provenance(config: ExperimentConfig) -> Provenance:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    surface = config.surface
    h = config.fd_step or tancalc.default_step(surface)
    outer, inner = tancalc.nested_steps(surface, base=h)
    return Provenance(
        config_sha256=hashlib.sha256(canonical.encode()).hexdigest(),
        fd_steps={"first": h, "nested_outer": outer, "nested_inner": inner},
        tolerances={
            "identity": identities.tolerance_for(surface),
            "solve_residual": solver.RESIDUAL_TOL,
            "killing": config.killing_tol,
            "min_order": MIN_ORDER,
            "tau_slope_min": TAU_SLOPE_MIN,
            "tau_slope_max": TAU_SLOPE_MAX,
        },
    )


def _spaces(config: ExperimentConfig, level: int) -> assembly.FESpaces:
    return assembly.build_spaces(mesh.mesh_for_surface(config.surface, level), pressure_kind=config.pressure_space)


def _tau_for(formulation: Formulation, tau: float) -> float:
    return tau if Formulation(formulation) in AUGMENTED else 0.0


def solve_case(spaces: assembly.FESpaces, case: ManufacturedCase, formulation: Formulation,
               tau: float = 0.0, rho: float = 1.0, killing_tol: float = 0.1) -> SolveReport:
    """Assembles and solves one formulation, attaching error norms when the case has an exact solution."""
    system = assembly.assemble_system(spaces, formulation, case.mu, _tau_for(formulation, tau), f=case.f, rho=rho)
    report = solver.solve_saddle(system, killing_tol=killing_tol)
    if case.has_exact_solution:
        errors = solver.error_norms(spaces, report.velocity, report.pressure, case.u_exact, case.pi_exact)
        report = report.model_copy(update={"errors": errors})
    return report


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(config: ExperimentConfig) -> CommandResult:
    requests = config.identities or [IdentityRequest(identity_id=i) for i in IdentityId]
    print(f"📐 Verifying {len(requests)} identities on the {config.surface.kind} ...")
    reports: List[IdentityCheckReport] = []
    failures = []
    for request in requests:
        surface = request.surface or config.surface
        try:
            report = identities.verify_identity(
                request.identity_id, surface, family=request.field_family,
                samples=request.samples if "samples" in request.model_fields_set else config.samples,
                fd_step=request.fd_step or config.fd_step, seed=config.seed,
            )
        except TansurfError as exc:
            failures.append(_failure(str(request.identity_id), exc))
            continue
        marker = "✅" if report.passed else "⚠️"
        print(f"   {marker} {report.identity_id:<32} rel {report.max_rel_residual:.2e} "
              f"scaled {report.max_scaled_residual:.2e} (tol {report.tolerance:g})")
        reports.append(report)

    table = pd.DataFrame([
        {"identity": r.identity_id, "surface": r.surface.kind, "family": r.field_family,
         "samples": r.sample_count, "max_rel_residual": r.max_rel_residual,
         "max_abs_residual": r.max_abs_residual, "max_scaled_residual": r.max_scaled_residual,
         "tolerance": r.tolerance, "passed": r.passed}
        for r in reports
    ])
    residuals = pd.DataFrame([
        {"identity": r.identity_id, "index": s.index, "x": s.point[0], "y": s.point[1], "z": s.point[2],
         "rel_residual": s.rel_residual, "abs_residual": s.abs_residual}
        for r in reports for s in r.per_point
    ])
    passed = not failures and all(r.passed for r in reports)
    return CommandResult(
        payload={"checks": [r.model_dump(mode="json") for r in reports], "failures": failures},
        tables={"identities": table, "residuals": residuals},
        passed=passed,
    )


# ---------------------------------------------------------------------------
# solve / convergence
# ---------------------------------------------------------------------------

def _reaction_summary(case: ManufacturedCase, config: ExperimentConfig) -> Dict[str, float]:
    pts = geometry.sample_points(config.surface, config.samples, config.seed)
    b_N = tancalc.normal_reaction(tancalc.tangential_part(case.u_exact), case.pi_exact, pts,
                                  mu=config.mu, rho=config.rho)
    return {"max_abs": float(np.abs(b_N).max()), "mean": float(b_N.mean()), "samples": len(pts)}


def _level_row(report: SolveReport) -> Dict[str, Any]:
    row = {"level": report.level, "h": report.h, "velocity_dofs": report.velocity_dofs,
           "pressure_dofs": report.pressure_dofs, "residual_norm": report.residual_norm,
           "u_N_l2": report.u_N_l2, "rhs_killing_correction": report.rhs_killing_correction}
    if report.errors is not None:
        row.update({"velocity_h1": report.errors.velocity_h1, "velocity_l2": report.errors.velocity_l2,
                    "pressure_l2": report.errors.pressure_l2})
    if report.constants is not None:
        row.update(report.constants.model_dump())
    return row


def _solve_levels(config: ExperimentConfig, out_dir: Optional[Path]):
    case = manufactured_case(config.surface, config.family, config.mu)
    reports: List[SolveReport] = []
    failures = []
    for level in config.levels:
        label = f"level {level}"
        try:
            spaces = _spaces(config, level)
            report = solve_case(spaces, case, config.formulation, config.tau, config.rho, config.killing_tol)
            if config.estimate_constants:
                report = report.model_copy(update={"constants": solver.estimate_constants(spaces, config.mu)})
        except TansurfError as exc:
            failures.append(_failure(label, exc))
            continue
        errors = report.errors
        detail = f"H1 {errors.velocity_h1:.3e}" if errors is not None else "no exact solution"
        print(f"   ↳ {label}: h {report.h:.3f}, {report.velocity_dofs} velocity dofs, {detail}, "
              f"u_N {report.u_N_l2:.3e}")
        if out_dir is not None:
            V = len(spaces.mesh.vertices)
            point_data = {"velocity": report.velocity.reshape(-1, 3)[:V]}
            if len(report.pressure) == V:
                point_data["pressure"] = report.pressure
            mesh.write_vtk(out_dir / "fields" / f"{config.formulation}_level{level}.vtk", spaces.mesh, point_data)
        reports.append(report)
    return case, reports, failures


def cmd_solve(config: ExperimentConfig, out_dir: Optional[Path] = None) -> CommandResult:
    print(f"🧮 Solving {config.family} with the {config.formulation} formulation on the {config.surface.kind} ...")
    try:
        case, reports, failures = _solve_levels(config, out_dir)
    except TansurfError as exc:
        return CommandResult(payload={"solves": [], "failures": [_failure("case", exc)]}, passed=False)
    payload: Dict[str, Any] = {"solves": [r.model_dump(mode="json") for r in reports], "failures": failures}
    if reports and case.has_exact_solution:
        payload["normal_reaction"] = _reaction_summary(case, config)
    return CommandResult(payload=payload, tables={"solve": pd.DataFrame([_level_row(r) for r in reports])},
                         passed=not failures)


def observed_orders(table: pd.DataFrame, columns: List[str]) -> pd.DataFrame:
    """Adds order_<col> = log2(e_prev / e) per refinement step (NaN on the coarsest level)."""
    table = table.sort_values("level").reset_index(drop=True)
    for col in columns:
        if col in table and table[col].notna().all():
            table[f"order_{col}"] = np.log2(table[col].shift(1) / table[col])
    return table


def cmd_convergence(config: ExperimentConfig, out_dir: Optional[Path] = None) -> CommandResult:
    print(f"📦 Convergence study: {config.family}, {config.formulation}, levels {config.levels} ...")
    try:
        case, reports, failures = _solve_levels(config, out_dir)
    except TansurfError as exc:
        return CommandResult(payload={"levels": [], "failures": [_failure("case", exc)]}, passed=False)
    if not case.has_exact_solution:
        failures.append(_failure("case", ConfigError(f"{config.family} has no exact solution to converge to")))
    columns = ["velocity_h1", "velocity_l2", "pressure_l2", "u_N_l2"]
    table = observed_orders(pd.DataFrame([_level_row(r) for r in reports]), columns) if reports else pd.DataFrame()

    checks: Dict[str, Optional[float]] = {}
    passed = not failures
    if len(table) >= 2:
        last = table.iloc[-1]
        for col in ("velocity_h1", "pressure_l2"):
            checks[col] = float(last.get(f"order_{col}", np.nan))
            passed = passed and bool(checks[col] >= MIN_ORDER)
        if Formulation(config.formulation) == Formulation.MULTIPLIER:
            ratios = (table["u_N_l2"].shift(1) / table["u_N_l2"]).dropna()
            checks["u_N_min_ratio"] = float(ratios.min())
            passed = passed and bool(ratios.min() >= MIN_NORMAL_RATIO)
        minimum = {"velocity_h1": MIN_ORDER, "pressure_l2": MIN_ORDER, "u_N_min_ratio": MIN_NORMAL_RATIO}
        for name, value in checks.items():
            print(f"   {'✅' if value >= minimum[name] else '⚠️'} {name}: {value:.3f}")
    else:
        print("   ⚠️ fewer than two successful levels, no orders computed")
    return CommandResult(
        payload={"levels": json.loads(table.to_json(orient="records")), "checks": checks, "failures": failures},
        tables={"convergence": table},
        passed=passed,
    )


# ---------------------------------------------------------------------------
# tau sweep
# ---------------------------------------------------------------------------

def coercivity_threshold(surface: LevelSetSurface, mu: float) -> float:
    """2 mu ||H||^2_inf: the augmented forms are coercive above this tau."""
    return 2.0 * mu * geometry.max_curvature(surface) ** 2


def _tangential_h1(spaces: assembly.FESpaces, coeffs: np.ndarray) -> float:
    values, grads = assembly.velocity_at_quadrature(spaces, coeffs)
    return solver.tangential_h1_norm(values, grads, spaces.quad)


def sweep_point(spaces: assembly.FESpaces, case: ManufacturedCase, tau: float, rho: float = 1.0,
                killing_tol: float = 0.1) -> TauSweepRow:
    """
    One tau of the sweep: augmented-full solution u_hat against the
    augmented-tangential reference u on the same mesh.

    u_hat - u solves the augmented-full system with load -(D u), D the
    difference of the two viscous forms. D u has two parts: the normal test
    against the tangential strain of u, C u, and the terms carrying the
    discrete normal residue u.n of the reference. Only C u survives for an
    exactly tangential reference, so the consistency gap w is the response
    to -C u alone; the raw difference is reported next to it.
    """
    full_system = assembly.assemble_system(spaces, Formulation.AUGMENTED_FULL, case.mu, tau, f=case.f, rho=rho)
    reference_system = assembly.assemble_system(spaces, Formulation.AUGMENTED_TANGENTIAL, case.mu, tau,
                                                f=case.f, rho=rho)
    full = solver.solve_saddle(full_system, killing_tol=killing_tol)
    reference = solver.solve_saddle(reference_system, killing_tol=killing_tol)

    drive = -(assembly.assemble_normal_coupling(spaces, case.mu) @ reference.velocity)
    gap = solver.solve_saddle(full_system.model_copy(update={"rhs": drive}), killing_tol=killing_tol)

    tangential = _tangential_h1(spaces, gap.velocity)
    penalty = float(np.sqrt(tangential ** 2 + tau / (2.0 * case.mu) * gap.u_N_l2 ** 2))
    ref_norm = _tangential_h1(spaces, reference.velocity)
    return TauSweepRow(
        tau=tau,
        tangential_error_h1=tangential,
        penalty_error=penalty,
        normalized_error=penalty / ref_norm if ref_norm > 0.0 else penalty,
        gap_normal_l2=gap.u_N_l2,
        raw_gap_h1=_tangential_h1(spaces, full.velocity - reference.velocity),
        normal_l2=full.u_N_l2,
        reference_normal_l2=reference.u_N_l2,
    )


def _loglog_slope(x: List[float], y: List[float]) -> float:
    y = np.maximum(np.asarray(y, dtype=float), 1e-300)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def tau_sweep(config: ExperimentConfig) -> TauSweepReport:
    """
    Consistency gap between the augmented-full and augmented-tangential
    solutions over the tau list, on the finest configured level. The slope
    check runs on the penalty-weighted gap sqrt(||P w||_1^2 + tau/(2 mu) ||w.n||^2).

    Raises:
        BelowThreshold: the smallest tau does not exceed 2 mu ||H||^2_inf.
    """
    threshold = coercivity_threshold(config.surface, config.mu)
    if min(config.taus) <= threshold:
        raise BelowThreshold(f"tau {min(config.taus):g} at or below the coercivity threshold {threshold:g}")
    level = config.levels[-1]
    spaces = _spaces(config, level)
    case = manufactured_case(config.surface, config.family, config.mu)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(lambda tau: sweep_point(spaces, case, tau, config.rho, config.killing_tol), config.taus))
    taus = [r.tau for r in rows]
    slope = _loglog_slope(taus, [r.penalty_error for r in rows])
    return TauSweepReport(
        level=level, mu=config.mu, threshold=threshold, slope=slope,
        tangential_slope=_loglog_slope(taus, [r.tangential_error_h1 for r in rows]),
        raw_slope=_loglog_slope(taus, [r.raw_gap_h1 for r in rows]),
        normal_slope=_loglog_slope(taus, [r.normal_l2 for r in rows]),
        rows=rows, passed=bool(TAU_SLOPE_MIN <= slope <= TAU_SLOPE_MAX),
    )


def cmd_tau_sweep(config: ExperimentConfig) -> CommandResult:
    print(f"📦 Tau sweep over {config.taus} on level {config.levels[-1]} ...")
    try:
        report = tau_sweep(config)
    except TansurfError as exc:
        return CommandResult(payload={"sweep": None, "failures": [_failure("tau sweep", exc)]}, passed=False)
    for row in report.rows:
        print(f"   ↳ tau {row.tau:.0e}: gap {row.penalty_error:.3e} (tangential {row.tangential_error_h1:.3e}, "
              f"raw {row.raw_gap_h1:.3e}), u_N {row.normal_l2:.3e}")
    print(f"   {'✅' if report.passed else '⚠️'} slope {report.slope:.3f} in [{TAU_SLOPE_MIN}, {TAU_SLOPE_MAX}] "
          f"(tangential {report.tangential_slope:.3f}, raw {report.raw_slope:.3f}, normal {report.normal_slope:.3f})")
    table = pd.DataFrame([r.model_dump() for r in report.rows])
    return CommandResult(payload={"sweep": report.model_dump(mode="json"), "failures": []},
                         tables={"tau_sweep": table}, passed=report.passed)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def cmd_constants(config: ExperimentConfig) -> CommandResult:
    print(f"🧮 Estimating discrete Korn and inf-sup constants on levels {config.levels} ...")
    rows, failures = [], []
    for level in config.levels:
        try:
            spaces = _spaces(config, level)
            constants = solver.estimate_constants(spaces, config.mu)
        except TansurfError as exc:
            failures.append(_failure(f"level {level}", exc))
            continue
        rows.append({"level": level, "h": spaces.mesh.h, **constants.model_dump()})
        print(f"   ↳ level {level}: korn {constants.korn_h:.4f} "
              f"(unconstrained {constants.korn_h_unconstrained:.4f}), inf-sup {constants.infsup_h}")
    table = pd.DataFrame(rows)

    checks: Dict[str, bool] = {}
    if rows:
        for col in ("korn_h", "infsup_h"):
            values = table[col].dropna()
            checks[f"{col}_positive"] = bool((values > CONSTANT_FLOOR).all())
            variation = (values.diff().abs() / values.shift(1)).dropna()
            checks[f"{col}_stable"] = bool((variation < CONSTANT_VARIATION).all())
        last = table.iloc[-1]
        if geometry.killing_axes(config.surface) and last["level"] >= COLLAPSE_MIN_LEVEL:
            checks["korn_collapse_without_killing"] = bool(
                last["korn_h_unconstrained"] < COLLAPSE_RATIO * last["korn_h"])
        for name, ok in checks.items():
            print(f"   {'✅' if ok else '⚠️'} {name}")
    return CommandResult(
        payload={"levels": rows, "checks": checks, "failures": failures},
        tables={"constants": table},
        passed=not failures and all(checks.values()),
    )


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def load_config(command: Command, path: Optional[str]) -> ExperimentConfig:
    """
    Reads the --config JSON. A top-level list is taken as the identity requests
    of a verify run.

    Raises:
        ConfigError: unreadable file or invalid fields.
    """
    raw: Any = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(raw, list):
        if Command(command) != Command.VERIFY:
            raise ConfigError("a list config is only accepted by verify")
        raw = {"identities": raw}
    raw["command"] = Command(command).value
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def run_command(config: ExperimentConfig, out_dir: Optional[Path] = None) -> CommandResult:
    command = Command(config.command)
    if command == Command.VERIFY:
        return cmd_verify(config)
    if command == Command.SOLVE:
        return cmd_solve(config, out_dir)
    if command == Command.CONVERGENCE:
        return cmd_convergence(config, out_dir)
    if command == Command.TAU_SWEEP:
        return cmd_tau_sweep(config)
    return cmd_constants(config)


def write_report(out_dir: Path, config: ExperimentConfig, result: CommandResult, metadata: RunMetadata) -> Path:
    """Writes report.json and tables/*.csv; returns the report path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": config.command, "passed": result.passed,
               "provenance": provenance(config).model_dump(), **result.payload}
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps({"payload": payload, "metadata": metadata.model_dump()},
                                      indent=2, sort_keys=True, default=float) + "\n")
    for name, table in result.tables.items():
        tables = out_dir / "tables"
        tables.mkdir(exist_ok=True)
        table.to_csv(tables / f"{name}.csv", index=False)
    return report_path


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("TANSURF_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="tansurf", description="Surface Stokes calculus and finite elements.")
    parser.add_argument("command", choices=[c.value for c in Command])
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--out", help="output directory (default $TANSURF_OUT_DIR)")
    args = parser.parse_args(argv)

    started = datetime.now(timezone.utc).isoformat()
    try:
        config = load_config(Command(args.command), args.config)
    except ConfigError as exc:
        print(f"❌ {exc}")
        return 2
    out_dir = Path(args.out or config.out_dir or os.getenv("TANSURF_OUT_DIR", DEFAULT_OUT_DIR))

    result = run_command(config, out_dir)
    exit_code = 0 if result.passed else 1
    metadata = RunMetadata(command=str(config.command), started_at=started,
                           finished_at=datetime.now(timezone.utc).isoformat(),
                           threads=_threads(), exit_code=exit_code)
    report_path = write_report(out_dir, config, result, metadata)
    print(f"🏁 {'All checks passed' if result.passed else 'Some checks failed'}; report at {report_path}")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
