"""
Tansurf Identity Catalog
Checks tangential-calculus identities numerically: both sides of every identity
are evaluated independently by finite differences at quasi-random surface points.

Key Logic:
- Test fields are fixed low-degree polynomials in y = x - center, restricted to
  the surface by normal extension (see `build_fields`).
- Pointwise identities: a sample passes when
  ||L - R|| / (||L|| + ||R|| + 1e-14) <= tol  or  ||L - R|| <= max(1e-8, tol * M),
  M = largest side magnitude (or the identity's natural term scale) over all samples.
- Integral identities (Leibniz, Stokes formula) use the lifted mesh quadrature
  and are normalized by the integral of the absolute integrand.
- Tolerance: 1e-5 on spheres, 1e-4 elsewhere.
"""
import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np

import geometry
import mesh
import tancalc
from errors import HypothesisViolated
from service_models import (
    Arity,
    ExtensionMode,
    FieldFamily,
    IdentityCheckReport,
    IdentityId,
    LevelSetSurface,
    ResidualSample,
    SurfaceKind,
)
from tancalc import AmbientField

logger = logging.getLogger("tansurf.identities")

# --- CONFIG ---
SPHERE_TOL = 1e-5
DEFAULT_TOL = 1e-4
RESIDUAL_EPS = 1e-14
ABS_FLOOR = 1e-8
TANGENTIAL_TOL = 1e-8
CURVATURE_RATIO_FLOOR = 1e-3
EVOLVING_GROWTH = 0.1
SPHERE_MESH_LEVEL = 5
TORUS_MESH_LEVEL = 3
WORST_POINTS = 20

DEFAULT_FAMILY: Dict[IdentityId, FieldFamily] = {
    IdentityId.PRODUCT_RULES: FieldFamily.TANGENTIAL_POLYNOMIAL,
    IdentityId.DIV_GRAD_TRANSPOSE: FieldFamily.TANGENTIAL_POLYNOMIAL,
    IdentityId.DIV_GRAD_TRANSPOSE_NORMAL: FieldFamily.AMBIENT_POLYNOMIAL,
    IdentityId.WEINGARTEN_DIVERGENCE: FieldFamily.GEOMETRY,
    IdentityId.DIV_GRAD_TRANSPOSE_GAUSS: FieldFamily.TANGENTIAL_POLYNOMIAL,
    IdentityId.NORMAL_RATE: FieldFamily.SCALING_SWIRL,
    IdentityId.PROJECTOR_RATE: FieldFamily.SCALING_SWIRL,
    IdentityId.WEINGARTEN_TANGENT: FieldFamily.TANGENTIAL_POLYNOMIAL,
    IdentityId.INEXTENSIBILITY: FieldFamily.INEXTENSIBLE,
    IdentityId.PRESSURE_STRESS_DIVERGENCE: FieldFamily.GEOMETRY,
    IdentityId.STRAIN_SPLIT: FieldFamily.AMBIENT_POLYNOMIAL,
    IdentityId.STRAIN_DIVERGENCE: FieldFamily.AMBIENT_POLYNOMIAL,
    IdentityId.STRAIN_DIVERGENCE_INEXTENSIBLE: FieldFamily.INEXTENSIBLE,
    IdentityId.CAYLEY_HAMILTON: FieldFamily.GEOMETRY,
    IdentityId.WEINGARTEN_PSEUDOINVERSE: FieldFamily.GEOMETRY,
    IdentityId.LEIBNIZ: FieldFamily.SCALING,
    IdentityId.STOKES_FORMULA: FieldFamily.TANGENTIAL_CUBIC,
    IdentityId.STRAIN_BOCHNER: FieldFamily.SURFACE_CURL,
    IdentityId.KORN_SPLIT: FieldFamily.TANGENTIAL_POLYNOMIAL,
}

EVOLVING = {IdentityId.NORMAL_RATE, IdentityId.PROJECTOR_RATE, IdentityId.LEIBNIZ}
INTEGRAL = {IdentityId.LEIBNIZ, IdentityId.STOKES_FORMULA}


# ---------------------------------------------------------------------------
# Test fields
# ---------------------------------------------------------------------------

def _local(surface: LevelSetSurface, pts: np.ndarray) -> np.ndarray:
    return pts - np.asarray(surface.center)


def poly_vector(y: np.ndarray) -> np.ndarray:
    """w(y) = (y1 y2 + y3^2/2, y2 y3 - 0.3 y1, 0.4 + y1 y3 + 0.2 y2^2)."""
    y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
    return np.column_stack([y1 * y2 + 0.5 * y3 ** 2, y2 * y3 - 0.3 * y1, 0.4 + y1 * y3 + 0.2 * y2 ** 2])


def poly_vector_jacobian(y: np.ndarray) -> np.ndarray:
    y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
    zero = np.zeros_like(y1)
    rows = [
        np.stack([y2, y1, y3], axis=-1),
        np.stack([zero - 0.3, y3, y2], axis=-1),
        np.stack([y3, 0.4 * y2, y1], axis=-1),
    ]
    return np.stack(rows, axis=1)


def cubic_vector(y: np.ndarray) -> np.ndarray:
    return np.column_stack([y[:, 0] ** 3, 0.5 * y[:, 1] ** 3, y[:, 2]])


def scalar_f(y):
    return 1.0 + y[:, 0] * y[:, 1] + 0.5 * y[:, 2] ** 2


def scalar_g(y):
    return y[:, 0] - y[:, 1] * y[:, 2] + 0.3


def pressure_poly(y):
    return y[:, 2] + 0.5 * y[:, 0] * y[:, 1]


def curl_potential(y):
    return y[:, 0] * y[:, 1] * y[:, 2] + 0.5 * y[:, 0]


def curl_potential_gradient(y):
    return np.column_stack([y[:, 1] * y[:, 2] + 0.5, y[:, 0] * y[:, 2], y[:, 0] * y[:, 1]])


def scalar_field(surface: LevelSetSurface, fn: Callable, name: str,
                 mode: ExtensionMode = ExtensionMode.NORMAL_EXTEND) -> AmbientField:
    return AmbientField(arity=Arity.SCALAR, fn=lambda x, t: fn(_local(surface, x)),
                        surface=surface, extension_mode=mode, name=name)


def vector_field(surface: LevelSetSurface, fn: Callable, name: str,
                 mode: ExtensionMode = ExtensionMode.NORMAL_EXTEND) -> AmbientField:
    return AmbientField(arity=Arity.VECTOR3, fn=lambda x, t: fn(_local(surface, x)),
                        surface=surface, extension_mode=mode, name=name)


def rotation_field(surface: LevelSetSurface, axis=None, tangential: bool = True) -> AmbientField:
    """a x y about the center; projected unless the rotation is already tangential."""
    a = np.asarray(axis if axis is not None else (0.0, 0.0, 1.0), dtype=float)
    raw = vector_field(surface, lambda y: np.cross(a, y), "rotation")
    return tancalc.tangential_part(raw) if tangential else raw


def _scaling_rate(surface: LevelSetSurface, t: float) -> float:
    return surface.growth_rate / geometry.scale_factor(surface, t)


def _scaling_velocity(surface: LevelSetSurface) -> AmbientField:
    c = np.asarray(surface.center)
    return AmbientField(arity=Arity.VECTOR3, fn=lambda y, t: _scaling_rate(surface, t) * (y - c),
                        surface=surface, name="scaling")


def _inextensible_velocity(surface: LevelSetSurface) -> AmbientField:
    """u = P w + u_N n with u_N = -div(P w) / kappa, so div u_T = -u_N kappa."""

    def fn(y, t):
        g = geometry.evaluate(surface, y, t)
        yl = _local(surface, y)
        w = poly_vector(yl)
        w_N = np.einsum("ni,ni->n", g.n, w)
        div_w_T = np.einsum("nij,nji->n", g.P, poly_vector_jacobian(yl)) - w_N * g.kappa
        if np.any(np.abs(g.kappa) < CURVATURE_RATIO_FLOOR * geometry.max_curvature(surface, t)):
            raise HypothesisViolated("inextensible test field needs mean curvature bounded away from zero")
        u_N = -div_w_T / g.kappa
        return np.einsum("nij,nj->ni", g.P, w) + u_N[:, None] * g.n

    return AmbientField(arity=Arity.VECTOR3, fn=fn, surface=surface, name="inextensible")


def build_fields(surface: LevelSetSurface, family: FieldFamily) -> Dict[str, AmbientField]:
    """
    Test fields for one family. Always contains the scalars f, g and pi; vector
    families add `u`, the velocity-like field the identity is checked on.
    """
    fields = {
        "f": scalar_field(surface, scalar_f, "f"),
        "g": scalar_field(surface, scalar_g, "g"),
        "pi": scalar_field(surface, pressure_poly, "pi"),
    }
    w = vector_field(surface, poly_vector, "w")
    family = FieldFamily(family)
    if family == FieldFamily.AMBIENT_POLYNOMIAL:
        fields["u"] = w
    elif family == FieldFamily.TANGENTIAL_POLYNOMIAL:
        fields["u"] = tancalc.tangential_part(w)
    elif family == FieldFamily.TANGENTIAL_CUBIC:
        fields["u"] = tancalc.tangential_part(vector_field(surface, cubic_vector, "w3"))
    elif family == FieldFamily.ROTATION:
        axes = geometry.killing_axes(surface)
        fields["u"] = rotation_field(surface, axes[-1] if axes else None)
    elif family == FieldFamily.SURFACE_CURL:
        psi = scalar_field(surface, curl_potential, "psi")
        fields["u"] = tancalc.surface_curl(psi, gradient=lambda y, t: curl_potential_gradient(_local(surface, y)))
    elif family == FieldFamily.INEXTENSIBLE:
        fields["u"] = _inextensible_velocity(surface)
    elif family in (FieldFamily.SCALING, FieldFamily.SCALING_SWIRL):
        scaling = _scaling_velocity(surface)
        if family == FieldFamily.SCALING:
            fields["u"] = scaling
        else:
            swirl = tancalc.tangential_part(w)
            fields["u"] = AmbientField(arity=Arity.VECTOR3, fn=lambda y, t: scaling(y, t) + swirl(y, t),
                                       surface=surface, name="scaling+swirl")
    # second tangential field for the dot-product rule
    fields["v"] = tancalc.tangential_part(vector_field(surface, cubic_vector, "w3"))
    return fields


# ---------------------------------------------------------------------------
# Hypothesis checks
# ---------------------------------------------------------------------------

def _require_velocity(fields, identity_id) -> AmbientField:
    if "u" not in fields:
        raise HypothesisViolated(f"{identity_id} needs a vector field family, got geometry only")
    return fields["u"]


def _require_tangential(field: AmbientField, pts, g, t, identity_id) -> None:
    v = field(pts, t)
    gap = np.linalg.norm(v - np.einsum("nij,nj->ni", g.P, v), axis=1).max()
    scale = max(1.0, float(np.abs(v).max()))
    if gap > TANGENTIAL_TOL * scale:
        raise HypothesisViolated(f"{identity_id} needs a tangential field; {field.name} has |v - Pv| = {gap:.3e}")


# ---------------------------------------------------------------------------
# Pointwise checks: each returns (lhs, rhs, scale) with rows per sample
# ---------------------------------------------------------------------------

class _Context:
    def __init__(self, surface, fields, pts, t, step, identity_id):
        self.surface = surface
        self.fields = fields
        self.pts = pts
        self.t = t
        self.h = step
        self.steps = tancalc.nested_steps(surface, t, step)
        self.g = geometry.evaluate(surface, pts, t)
        self.identity_id = identity_id

    @property
    def h_out(self) -> float:
        return self.steps[0]


def _flat(*arrays) -> np.ndarray:
    return np.concatenate([a.reshape(len(a), -1) for a in arrays], axis=1)


def _matvec(M, v):
    return np.einsum("nij,nj->ni", M, v)


def _div_grad_transpose(ctx: _Context, v: AmbientField) -> np.ndarray:
    h_out, h_in = ctx.steps
    inner = AmbientField(arity=Arity.MATRIX3,
                         fn=lambda y, t: np.swapaxes(tancalc.grad_surface_vector(v, y, t, h_in), 1, 2),
                         surface=v.surface, name=f"grad^T {v.name}")
    return _matvec(ctx.g.P, tancalc.div_surface_matrix(inner, ctx.pts, ctx.t, h_out))


def _grad_div(ctx: _Context, v: AmbientField) -> np.ndarray:
    h_out, h_in = ctx.steps
    div = tancalc.operator_field(tancalc.div_surface_vector, v, Arity.SCALAR, h_in)
    return tancalc.grad_surface_scalar(div, ctx.pts, ctx.t, h_out)


def _check_product_rules(ctx: _Context):
    f, g, u, v = ctx.fields["f"], ctx.fields["g"], ctx.fields["u"], ctx.fields["v"]
    _require_tangential(u, ctx.pts, ctx.g, ctx.t, ctx.identity_id)
    _require_tangential(v, ctx.pts, ctx.g, ctx.t, ctx.identity_id)
    pts, t, h = ctx.pts, ctx.t, ctx.h
    fg = AmbientField(arity=Arity.SCALAR, fn=lambda y, tt: f(y, tt) * g(y, tt), surface=ctx.surface, name="fg")
    udotv = AmbientField(arity=Arity.SCALAR, fn=lambda y, tt: np.einsum("ni,ni->n", u(y, tt), v(y, tt)),
                         surface=ctx.surface, name="u.v")
    fu = AmbientField(arity=Arity.VECTOR3, fn=lambda y, tt: f(y, tt)[:, None] * u(y, tt),
                      surface=ctx.surface, name="fu")
    fv, gv, uv, vv = f(pts, t), g(pts, t), u(pts, t), v(pts, t)
    grad_f = tancalc.grad_surface_scalar(f, pts, t, h)
    grad_g = tancalc.grad_surface_scalar(g, pts, t, h)
    grad_u = tancalc.grad_surface_vector(u, pts, t, h)
    grad_v = tancalc.grad_surface_vector(v, pts, t, h)

    lhs = _flat(tancalc.grad_surface_scalar(fg, pts, t, h),
                tancalc.grad_surface_scalar(udotv, pts, t, h),
                tancalc.grad_surface_vector(fu, pts, t, h))
    rhs = _flat(gv[:, None] * grad_f + fv[:, None] * grad_g,
                np.einsum("ni,nij->nj", vv, grad_u) + np.einsum("ni,nij->nj", uv, grad_v),
                fv[:, None, None] * grad_u + _matvec(ctx.g.P, uv)[:, :, None] * grad_f[:, None, :])
    return lhs, rhs, None


def _check_div_grad_transpose(ctx: _Context, gauss: bool):
    v = ctx.fields["u"]
    _require_tangential(v, ctx.pts, ctx.g, ctx.t, ctx.identity_id)
    g = ctx.g
    lhs = _div_grad_transpose(ctx, v)
    if gauss:
        curvature_term = g.K[:, None] * v(ctx.pts, ctx.t)
    else:
        curvature_term = _matvec(g.kappa[:, None, None] * g.H - g.H @ g.H, v(ctx.pts, ctx.t))
    return lhs, _grad_div(ctx, v) + curvature_term, None


def _check_div_grad_transpose_normal(ctx: _Context):
    v = ctx.fields["u"]
    h_out, h_in = ctx.steps
    g, pts, t = ctx.g, ctx.pts, ctx.t
    inner = tancalc.operator_field(tancalc.grad_surface_vector, v, Arity.MATRIX3, h_in)
    inner_T = AmbientField(arity=Arity.MATRIX3, fn=lambda y, tt: np.swapaxes(inner(y, tt), 1, 2),
                           surface=v.surface, name=f"grad^T {v.name}")
    normal_of_transpose = np.einsum("ni,ni->n", g.n, tancalc.div_surface_matrix(inner_T, pts, t, h_out))
    normal_of_plain = np.einsum("ni,ni->n", g.n, tancalc.div_surface_matrix(inner, pts, t, h_out))

    grad_v_T = tancalc.grad_surface_vector(tancalc.tangential_part(v), pts, t, ctx.h)
    v_N = np.einsum("ni,ni->n", g.n, v(pts, t))
    rhs = -np.einsum("nij,nji->n", g.H, grad_v_T) - v_N * np.trace(g.H @ g.H, axis1=1, axis2=2)
    return _flat(normal_of_transpose, normal_of_plain), _flat(rhs, rhs), None


def _check_weingarten_divergence(ctx: _Context):
    H = tancalc.weingarten_field(ctx.surface)
    kappa = tancalc.curvature_field(ctx.surface)
    lhs = _matvec(ctx.g.P, tancalc.div_surface_matrix(H, ctx.pts, ctx.t, ctx.h_out))
    rhs = tancalc.grad_surface_scalar(kappa, ctx.pts, ctx.t, ctx.h_out)
    return lhs, rhs, geometry.max_curvature(ctx.surface, ctx.t) ** 2


def _velocity_scale(ctx: _Context, u: AmbientField) -> float:
    """Curvature times the largest velocity: the size of n-dot when it does not vanish."""
    return geometry.max_curvature(ctx.surface, ctx.t) * float(np.abs(u(ctx.pts, ctx.t)).max())


def _check_normal_rate(ctx: _Context):
    u = _require_velocity(ctx.fields, ctx.identity_id)
    pts, t, g = ctx.pts, ctx.t, ctx.g
    n_dot = tancalc.material_derivative(tancalc.normal_field(ctx.surface), u, pts, t, ctx.h)
    u_T = tancalc.tangential_part(u)
    u_N = tancalc.normal_part(u)
    J = tancalc.jacobian(u, pts, t, ctx.h)
    first = _matvec(g.H, u_T(pts, t)) - tancalc.grad_surface_scalar(u_N, pts, t, ctx.h)
    second = -_matvec(g.P, np.einsum("nji,nj->ni", J, g.n))
    return _flat(n_dot, n_dot), _flat(first, second), _velocity_scale(ctx, u)


def _check_projector_rate(ctx: _Context):
    u = _require_velocity(ctx.fields, ctx.identity_id)
    pts, t, g = ctx.pts, ctx.t, ctx.g
    P_dot = tancalc.material_derivative(tancalc.projector_field(ctx.surface), u, pts, t, ctx.h)
    J = tancalc.jacobian(u, pts, t, ctx.h)
    Q = np.eye(3)[None] - g.P
    rhs = g.P @ np.swapaxes(J, 1, 2) @ Q + Q @ J @ g.P
    return P_dot, rhs, _velocity_scale(ctx, u)


def _check_weingarten_tangent(ctx: _Context):
    u = ctx.fields["u"]
    _require_tangential(u, ctx.pts, ctx.g, ctx.t, ctx.identity_id)
    J = tancalc.jacobian(u, ctx.pts, ctx.t, ctx.h)
    lhs = _matvec(ctx.g.H, u(ctx.pts, ctx.t))
    rhs = -np.einsum("nji,nj->ni", J, ctx.g.n)
    return lhs, rhs, None


def _check_inextensibility(ctx: _Context, family: FieldFamily):
    if family != FieldFamily.INEXTENSIBLE:
        raise HypothesisViolated(f"{ctx.identity_id} is checked on the inextensible family, got {family}")
    u = ctx.fields["u"]
    lhs = tancalc.div_surface_vector(tancalc.tangential_part(u), ctx.pts, ctx.t, ctx.h)
    rhs = -tancalc.normal_part(u)(ctx.pts, ctx.t) * ctx.g.kappa
    return lhs, rhs, None


def _check_pressure_stress(ctx: _Context):
    pi = ctx.fields["pi"]
    pi_P = AmbientField(arity=Arity.MATRIX3,
                        fn=lambda y, t: pi(y, t)[:, None, None] * geometry.evaluate(ctx.surface, y, t).P,
                        surface=ctx.surface, name="pi P")
    lhs = tancalc.div_surface_matrix(pi_P, ctx.pts, ctx.t, ctx.h)
    rhs = (tancalc.grad_surface_scalar(pi, ctx.pts, ctx.t, ctx.h)
           - (pi(ctx.pts, ctx.t) * ctx.g.kappa)[:, None] * ctx.g.n)
    return lhs, rhs, None


def _check_strain_split(ctx: _Context):
    u = ctx.fields["u"]
    u_N = tancalc.normal_part(u)(ctx.pts, ctx.t)
    lhs = tancalc.rate_of_strain(u, ctx.pts, ctx.t, ctx.h)
    rhs = tancalc.rate_of_strain(tancalc.tangential_part(u), ctx.pts, ctx.t, ctx.h) + u_N[:, None, None] * ctx.g.H
    return lhs, rhs, None


def _strain_divergence_terms(ctx: _Context, u: AmbientField):
    pts, t, g = ctx.pts, ctx.t, ctx.g
    u_T = tancalc.tangential_part(u)
    u_N = tancalc.normal_part(u)
    return {
        "lhs": tancalc.strain_divergence(u, pts, t, ctx.steps),
        "lap": tancalc.bochner_laplacian(u_T, pts, t, ctx.steps),
        "K_u": g.K[:, None] * u_T(pts, t),
        "grad_div": _grad_div(ctx, u_T),
        "u_N": u_N(pts, t),
        "grad_kappa": tancalc.grad_surface_scalar(tancalc.curvature_field(ctx.surface), pts, t, ctx.h_out),
        "grad_u_N": tancalc.grad_surface_scalar(u_N, pts, t, ctx.h),
    }


def _check_strain_divergence(ctx: _Context):
    s = _strain_divergence_terms(ctx, ctx.fields["u"])
    rhs = (0.5 * s["lap"] + 0.5 * s["K_u"] + 0.5 * s["grad_div"]
           + s["u_N"][:, None] * s["grad_kappa"] + _matvec(ctx.g.H, s["grad_u_N"]))
    return s["lhs"], rhs, None


def _check_strain_divergence_inextensible(ctx: _Context):
    u = ctx.fields["u"]
    pts, t, g = ctx.pts, ctx.t, ctx.g
    constraint = (tancalc.div_surface_vector(tancalc.tangential_part(u), pts, t, ctx.h)
                  + tancalc.normal_part(u)(pts, t) * g.kappa)
    scale = max(1.0, float(np.abs(u(pts, t)).max()))
    if np.abs(constraint).max() > 1e-6 * scale:
        raise HypothesisViolated(f"{ctx.identity_id} needs div u_T = -u_N kappa; "
                                 f"violated by {np.abs(constraint).max():.3e}")
    s = _strain_divergence_terms(ctx, u)
    bending = g.kappa[:, None, None] * g.P - g.H
    rhs = s["lap"] + s["K_u"] - s["grad_div"] - 2.0 * _matvec(bending, s["grad_u_N"])
    return 2.0 * s["lhs"], rhs, None


def _check_cayley_hamilton(ctx: _Context):
    g = ctx.g
    lhs = g.H @ g.H + g.K[:, None, None] * g.P
    return lhs, g.kappa[:, None, None] * g.H, geometry.max_curvature(ctx.surface, ctx.t) ** 2


def _curvature_mask(g) -> np.ndarray:
    k = np.abs(geometry.principal_curvatures(g))
    return k.min(axis=1) >= CURVATURE_RATIO_FLOOR * k.max()


def _check_weingarten_pseudoinverse(ctx: _Context):
    g = ctx.g
    lhs = g.kappa[:, None, None] * g.P - g.H
    rhs = g.K[:, None, None] * geometry.tangent_pseudoinverse(g.H, g.n)
    return lhs, rhs, geometry.max_curvature(ctx.surface, ctx.t)


def _check_strain_bochner(ctx: _Context):
    u = ctx.fields["u"]
    pts, t, g = ctx.pts, ctx.t, ctx.g
    _require_tangential(u, pts, g, t, ctx.identity_id)
    div = tancalc.div_surface_vector(u, pts, t, ctx.h)
    grad = tancalc.grad_surface_vector(u, pts, t, ctx.h)
    if np.abs(div).max() > 1e-6 * max(1.0, float(np.abs(grad).max())):
        raise HypothesisViolated(f"{ctx.identity_id} needs a divergence-free field; |div u| = {np.abs(div).max():.3e}")
    lhs = -2.0 * tancalc.strain_divergence(u, pts, t, ctx.steps)
    rhs = -tancalc.bochner_laplacian(u, pts, t, ctx.steps) - g.K[:, None] * u(pts, t)
    return lhs, rhs, None


def _check_korn_split(ctx: _Context):
    u = ctx.fields["u"]
    pts, t, g = ctx.pts, ctx.t, ctx.g
    _require_tangential(u, pts, g, t, ctx.identity_id)
    J = tancalc.jacobian(u, pts, t, ctx.h)
    Hu = _matvec(g.H, u(pts, t))
    outer = Hu[:, :, None] * g.n[:, None, :]
    rhs = 0.5 * (J @ g.P + g.P @ np.swapaxes(J, 1, 2)) + 0.5 * (outer + np.swapaxes(outer, 1, 2))
    return tancalc.rate_of_strain(u, pts, t, ctx.h), rhs, None


# ---------------------------------------------------------------------------
# Integral checks
# ---------------------------------------------------------------------------

def _mesh_level(surface: LevelSetSurface) -> int:
    return TORUS_MESH_LEVEL if surface.kind == SurfaceKind.TORUS else SPHERE_MESH_LEVEL


def _check_leibniz(surface: LevelSetSurface, fields, t: float, h: float) -> Tuple[float, float, int]:
    """
    d/dt of the surface integral of f = 1 + y3^2 (given on the neighborhood) against
    the integral of (f' + f div u). Returns (residual, normalizer, quadrature points).
    """
    u = fields["u"]
    f = AmbientField(arity=Arity.SCALAR, fn=lambda x, tt: 1.0 + _local(surface, x)[:, 2] ** 2, surface=surface,
                     extension_mode=ExtensionMode.GIVEN_ON_NEIGHBORHOOD, name="1+y3^2")
    k = tancalc.TIME_STEP
    base = mesh.mesh_for_surface(surface, _mesh_level(surface))

    def total(tt):
        quad = mesh.build_quadrature(mesh.mesh_at_time(base, tt))
        return mesh.integrate(quad, f(quad.points.reshape(-1, 3), tt).reshape(quad.weights.shape))

    lhs = (total(t + k) - total(t - k)) / (2.0 * k)
    quad = mesh.build_quadrature(mesh.mesh_at_time(base, t))
    pts = quad.points.reshape(-1, 3)
    integrand = tancalc.material_derivative(f, u, pts, t, h) + f(pts, t) * tancalc.div_surface_vector(u, pts, t, h)
    integrand = integrand.reshape(quad.weights.shape)
    rhs = mesh.integrate(quad, integrand)
    return abs(lhs - rhs), mesh.integrate(quad, np.abs(integrand)), pts.shape[0]


def _check_stokes_formula(surface: LevelSetSurface, fields, t: float, h: float) -> Tuple[float, float, int]:
    v = fields["u"]
    quad = mesh.build_quadrature(mesh.mesh_for_surface(surface, _mesh_level(surface)))
    pts = quad.points.reshape(-1, 3)
    div = tancalc.div_surface_vector(v, pts, t, h).reshape(quad.weights.shape)
    return abs(mesh.integrate(quad, div)), mesh.integrate(quad, np.abs(div)), pts.shape[0]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def tolerance_for(surface: LevelSetSurface) -> float:
    return SPHERE_TOL if surface.kind == SurfaceKind.SPHERE else DEFAULT_TOL


def _pointwise(identity_id: IdentityId, ctx: _Context, family: FieldFamily):
    checks = {
        IdentityId.PRODUCT_RULES: lambda: _check_product_rules(ctx),
        IdentityId.DIV_GRAD_TRANSPOSE: lambda: _check_div_grad_transpose(ctx, gauss=False),
        IdentityId.DIV_GRAD_TRANSPOSE_NORMAL: lambda: _check_div_grad_transpose_normal(ctx),
        IdentityId.WEINGARTEN_DIVERGENCE: lambda: _check_weingarten_divergence(ctx),
        IdentityId.DIV_GRAD_TRANSPOSE_GAUSS: lambda: _check_div_grad_transpose(ctx, gauss=True),
        IdentityId.NORMAL_RATE: lambda: _check_normal_rate(ctx),
        IdentityId.PROJECTOR_RATE: lambda: _check_projector_rate(ctx),
        IdentityId.WEINGARTEN_TANGENT: lambda: _check_weingarten_tangent(ctx),
        IdentityId.INEXTENSIBILITY: lambda: _check_inextensibility(ctx, family),
        IdentityId.PRESSURE_STRESS_DIVERGENCE: lambda: _check_pressure_stress(ctx),
        IdentityId.STRAIN_SPLIT: lambda: _check_strain_split(ctx),
        IdentityId.STRAIN_DIVERGENCE: lambda: _check_strain_divergence(ctx),
        IdentityId.STRAIN_DIVERGENCE_INEXTENSIBLE: lambda: _check_strain_divergence_inextensible(ctx),
        IdentityId.CAYLEY_HAMILTON: lambda: _check_cayley_hamilton(ctx),
        IdentityId.WEINGARTEN_PSEUDOINVERSE: lambda: _check_weingarten_pseudoinverse(ctx),
        IdentityId.STRAIN_BOCHNER: lambda: _check_strain_bochner(ctx),
        IdentityId.KORN_SPLIT: lambda: _check_korn_split(ctx),
    }
    lhs, rhs, scale = checks[identity_id]()
    return _flat(lhs), _flat(rhs), scale


def verify_identity(
    identity_id: IdentityId,
    surface: LevelSetSurface,
    family: Optional[FieldFamily] = None,
    samples: int = 200,
    fd_step: Optional[float] = None,
    seed: int = 0,
    t: float = 0.0,
) -> IdentityCheckReport:
    """
    Evaluates both sides of one catalog identity and reports the residuals.

    Args:
        identity_id: Catalog entry to check.
        surface: Surface to check on. Evolving identities give a static surface
            growth_rate 0.1.
        family: Test-field family; defaults to the identity's shipped family.
        samples: Number of Halton sample points (pointwise identities).
        fd_step: First-derivative step; nested operators use (10x, 0.1x) of it.

    Returns:
        IdentityCheckReport with the max relative, absolute and scaled residuals.

    Raises:
        HypothesisViolated: the fields do not satisfy the identity's hypotheses.
        StencilOutOfNeighborhood: the step is too large for the surface.
    """
    identity_id = IdentityId(identity_id)
    family = FieldFamily(family) if family is not None else DEFAULT_FAMILY[identity_id]
    if identity_id in EVOLVING and surface.growth_rate == 0.0:
        surface = surface.model_copy(update={"growth_rate": EVOLVING_GROWTH})

    tol = tolerance_for(surface)
    h = fd_step if fd_step is not None else tancalc.default_step(surface, t)
    fields = build_fields(surface, family)
    logger.debug("verifying %s on %s with family %s, step %.2e", identity_id.value, surface.kind, family.value, h)

    if identity_id in INTEGRAL:
        check = _check_leibniz if identity_id == IdentityId.LEIBNIZ else _check_stokes_formula
        residual, normalizer, count = check(surface, fields, t, h)
        rel = residual / (normalizer + RESIDUAL_EPS)
        return IdentityCheckReport(
            identity_id=identity_id, surface=surface, field_family=family, sample_count=count,
            max_rel_residual=rel, max_abs_residual=residual, max_scaled_residual=rel,
            tolerance=tol, passed=bool(rel <= tol), fd_step=h,
        )

    pts = geometry.sample_points(surface, samples, seed, t)
    if identity_id == IdentityId.WEINGARTEN_PSEUDOINVERSE:
        keep = _curvature_mask(geometry.shape_operator(surface, pts, t))
        if not np.any(keep):
            raise HypothesisViolated("no sample point has both principal curvatures bounded away from zero")
        pts = pts[keep]

    ctx = _Context(surface, fields, pts, t, h, identity_id)
    lhs, rhs, scale = _pointwise(identity_id, ctx, family)

    diff = np.linalg.norm(lhs - rhs, axis=1)
    l_norm = np.linalg.norm(lhs, axis=1)
    r_norm = np.linalg.norm(rhs, axis=1)
    rel = diff / (l_norm + r_norm + RESIDUAL_EPS)
    magnitude = max(float(np.maximum(l_norm, r_norm).max()), scale or 0.0)
    floor = max(ABS_FLOOR, tol * magnitude)
    point_ok = (rel <= tol) | (diff <= floor)

    per_point = [
        ResidualSample(index=i, point=tuple(pts[i]), rel_residual=float(rel[i]), abs_residual=float(diff[i]))
        for i in range(len(pts))
    ]
    worst = np.argsort(-diff, kind="stable")[:WORST_POINTS]
    return IdentityCheckReport(
        identity_id=identity_id,
        surface=surface,
        field_family=family,
        sample_count=len(pts),
        max_rel_residual=float(rel.max()),
        max_abs_residual=float(diff.max()),
        max_scaled_residual=float(diff.max() / magnitude) if magnitude > 0.0 else float(diff.max()),
        tolerance=tol,
        passed=bool(np.all(point_ok)),
        fd_step=h,
        per_point=per_point,
        worst_indices=[int(i) for i in worst],
    )
