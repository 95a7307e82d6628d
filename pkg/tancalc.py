"""
Tansurf Tangential Calculus
Finite-difference kernel for surface derivatives of normally extended fields.

Key Logic:
- An `AmbientField` wraps a vectorized callable fn(points, t). In NORMAL_EXTEND
  mode it is evaluated at the closest point, so f(x) = f(p(x)) and the ambient
  gradient only sees tangential variation.
- All first derivatives come from one 6-point central stencil (`jacobian`).
- Second-order operators (Bochner Laplacian, P div E_s) nest two stencils: the
  inner operator becomes a normally extended matrix field, differentiated by the
  outer stencil with a 100x larger step.
- Default steps scale with `geometry.fd_scale`: first derivatives 1e-4, nested
  (outer, inner) = (1e-3, 1e-5).
"""
import logging
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

import geometry
from errors import OutOfNeighborhood, StencilOutOfNeighborhood
from service_models import Arity, ExtensionMode, LevelSetSurface

logger = logging.getLogger("tansurf.tancalc")

# --- CONFIG ---
FIRST_STEP_FACTOR = 1e-4
NESTED_OUTER_FACTOR = 10.0
NESTED_INNER_FACTOR = 0.1
TIME_STEP = 1e-4
NOISE_WARN_RATIO = 1e-4

_VALUE_SHAPES = {Arity.SCALAR: (), Arity.VECTOR3: (3,), Arity.MATRIX3: (3, 3)}
_EPS = np.finfo(float).eps


class AmbientField(BaseModel):
    """
    A field on the tubular neighborhood of `surface`.
    `fn` maps (points (N, 3), t) to values (N,), (N, 3) or (N, 3, 3); constant
    outputs of the bare value shape are broadcast.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, use_enum_values=True)

    arity: Arity
    fn: Callable[[np.ndarray, float], np.ndarray]
    surface: LevelSetSurface
    extension_mode: ExtensionMode = ExtensionMode.NORMAL_EXTEND
    name: str = "field"

    @property
    def value_shape(self) -> Tuple[int, ...]:
        return _VALUE_SHAPES[Arity(self.arity)]

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        pts, single = geometry.as_points(x)
        if self.extension_mode == ExtensionMode.NORMAL_EXTEND:
            where = geometry.closest_point(self.surface, pts, t)
        else:
            geometry.check_bbox(self.surface, pts, t)
            where = pts
        values = np.asarray(self.fn(where, t), dtype=float)
        values = np.broadcast_to(values, (len(pts),) + self.value_shape).copy()
        return geometry.unbatch(values, single)


# --- STEPS ---

def default_step(surface: LevelSetSurface, t: float = 0.0) -> float:
    return FIRST_STEP_FACTOR * geometry.fd_scale(surface, t)


def nested_steps(surface: LevelSetSurface, t: float = 0.0, base: Optional[float] = None) -> Tuple[float, float]:
    """(outer, inner) steps for second-order operators around a first-derivative step."""
    h = base if base is not None else default_step(surface, t)
    return NESTED_OUTER_FACTOR * h, NESTED_INNER_FACTOR * h


# --- STENCIL ---

def jacobian(field: AmbientField, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
    """
    Central-difference ambient derivative.

    Args:
        field: Field to differentiate.
        x: Points (N, 3).
        step: Stencil half-width; defaults to `default_step`.

    Returns:
        Array of shape (N, *value_shape, 3); the last axis indexes d/dx_k.

    Raises:
        StencilOutOfNeighborhood: a stencil point left the neighborhood.
    """
    pts, _ = geometry.as_points(x)
    h = step if step is not None else default_step(field.surface, t)
    offsets = np.concatenate([h * np.eye(3), -h * np.eye(3)])[[0, 3, 1, 4, 2, 5]]
    stencil = (pts[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    try:
        values = field(stencil, t)
    except StencilOutOfNeighborhood:
        raise
    except OutOfNeighborhood as exc:
        raise StencilOutOfNeighborhood(f"{field.name}: stencil with step {h:.3g} left the neighborhood ({exc})") from exc
    values = values.reshape((len(pts), 3, 2) + field.value_shape)
    diff = (values[:, :, 0] - values[:, :, 1]) / (2.0 * h)
    return np.moveaxis(diff, 1, -1)


def _geom(surface: LevelSetSurface, x, t: float):
    pts, _ = geometry.as_points(x)
    return pts, geometry.evaluate(surface, pts, t)


# --- FIRST-ORDER OPERATORS ---

def grad_surface_scalar(f: AmbientField, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
    """Row vector (grad f) P, shape (N, 3)."""
    pts, g = _geom(f.surface, x, t)
    return np.einsum("nk,nkj->nj", jacobian(f, pts, t, step), g.P)


def grad_surface_vector(v: AmbientField, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
    """P (grad v) P, shape (N, 3, 3)."""
    pts, g = _geom(v.surface, x, t)
    return g.P @ jacobian(v, pts, t, step) @ g.P


def div_surface_vector(v: AmbientField, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
    pts, g = _geom(v.surface, x, t)
    return np.einsum("nik,nki->n", jacobian(v, pts, t, step), g.P)


def div_surface_matrix(A: AmbientField, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
    """Row-wise tangential divergence: (div A)_i = div(e_i^T A), shape (N, 3)."""
    pts, g = _geom(A.surface, x, t)
    return np.einsum("nilk,nkl->ni", jacobian(A, pts, t, step), g.P)


def rate_of_strain(v: AmbientField, x, t: float = 0.0, step: Optional[float] = None) -> np.ndarray:
    """E_s(v) = 1/2 P (grad v + grad v^T) P."""
    pts, g = _geom(v.surface, x, t)
    J = jacobian(v, pts, t, step)
    return 0.5 * g.P @ (J + np.swapaxes(J, 1, 2)) @ g.P


def stress_tensor(pi: AmbientField, v: AmbientField, x, t: float = 0.0, mu: float = 1.0,
                  step: Optional[float] = None) -> np.ndarray:
    """Inextensible Boussinesq-Scriven stress -pi P + 2 mu E_s(v)."""
    pts, g = _geom(v.surface, x, t)
    return -pi(pts, t)[:, None, None] * g.P + 2.0 * mu * rate_of_strain(v, pts, t, step)


def material_derivative(f: AmbientField, u: AmbientField, x, t: float = 0.0,
                        step: Optional[float] = None, time_step: float = TIME_STEP) -> np.ndarray:
    """
    Derivative along material trajectories: df/dt + (grad f) u.
    The time derivative is a central difference at fixed x.
    """
    pts, _ = geometry.as_points(x)
    dfdt = (f(pts, t + time_step) - f(pts, t - time_step)) / (2.0 * time_step)
    convective = np.einsum("n...k,nk->n...", jacobian(f, pts, t, step), u(pts, t))
    return dfdt + convective


# --- FIELD BUILDERS ---

def tangential_part(v: AmbientField) -> AmbientField:
    def fn(y, t):
        return np.einsum("nij,nj->ni", geometry.evaluate(v.surface, y, t).P, v(y, t))
    return AmbientField(arity=Arity.VECTOR3, fn=fn, surface=v.surface, name=f"P {v.name}")


def normal_part(v: AmbientField) -> AmbientField:
    def fn(y, t):
        return np.einsum("ni,ni->n", geometry.evaluate(v.surface, y, t).n, v(y, t))
    return AmbientField(arity=Arity.SCALAR, fn=fn, surface=v.surface, name=f"n.{v.name}")


def surface_curl(psi: AmbientField, gradient: Optional[Callable] = None, step: Optional[float] = None) -> AmbientField:
    """
    n x grad psi; tangential and divergence free on a closed surface.
    `gradient(y, t)` gives the ambient gradient of psi in closed form; without it
    the tangential gradient is taken by finite differences, which adds one more
    level of step noise when the curl is differentiated again.
    """
    def fn(y, t):
        n = geometry.evaluate(psi.surface, y, t).n
        grad = gradient(y, t) if gradient is not None else grad_surface_scalar(psi, y, t, step)
        return np.cross(n, grad)
    return AmbientField(arity=Arity.VECTOR3, fn=fn, surface=psi.surface, name=f"curl {psi.name}")


def normal_field(surface: LevelSetSurface) -> AmbientField:
    return AmbientField(arity=Arity.VECTOR3, fn=lambda y, t: geometry.evaluate(surface, y, t).n,
                        surface=surface, name="n")


def projector_field(surface: LevelSetSurface) -> AmbientField:
    return AmbientField(arity=Arity.MATRIX3, fn=lambda y, t: geometry.evaluate(surface, y, t).P,
                        surface=surface, name="P")


def weingarten_field(surface: LevelSetSurface) -> AmbientField:
    return AmbientField(arity=Arity.MATRIX3, fn=lambda y, t: geometry.evaluate(surface, y, t).H,
                        surface=surface, name="H")


def curvature_field(surface: LevelSetSurface) -> AmbientField:
    return AmbientField(arity=Arity.SCALAR, fn=lambda y, t: geometry.evaluate(surface, y, t).kappa,
                        surface=surface, name="kappa")


# --- SECOND-ORDER OPERATORS ---

def operator_field(op, v: AmbientField, arity: Arity, step: Optional[float] = None, name: Optional[str] = None) -> AmbientField:
    """
    Normally extended field y -> op(v, y, t, step), evaluated at closest points.
    Lets a first-order operator output be differentiated again.
    """
    return AmbientField(arity=arity, fn=lambda y, t: op(v, y, t, step), surface=v.surface,
                        name=name or f"{op.__name__}({v.name})")


def _nested_divergence(inner_op, v: AmbientField, x, t: float, steps: Optional[Tuple[float, float]], label: str):
    pts, g = _geom(v.surface, x, t)
    h_out, h_in = steps if steps is not None else nested_steps(v.surface, t)
    inner = operator_field(inner_op, v, Arity.MATRIX3, h_in, f"{label}({v.name})")
    result = np.einsum("nij,nj->ni", g.P, div_surface_matrix(inner, pts, t, h_out))

    scale = float(np.max(np.abs(v(pts, t)), initial=0.0))
    noise = _EPS * scale / (h_in * h_out)
    size = float(np.max(np.abs(result), initial=0.0))
    if noise > NOISE_WARN_RATIO * max(size, _EPS):
        logger.warning("%s of %s: nested FD noise %.2e against result size %.2e (steps %.1e / %.1e)",
                       label, v.name, noise, size, h_out, h_in)
    return result


def bochner_laplacian(v: AmbientField, x, t: float = 0.0, steps: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """
    Bochner Laplacian P div(grad_surface_vector v) of a tangential field.

    Args:
        steps: (outer, inner) stencil steps; defaults to `nested_steps`.
    """
    return _nested_divergence(grad_surface_vector, v, x, t, steps, "bochner")


def strain_divergence(v: AmbientField, x, t: float = 0.0, steps: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """P div E_s(v) for any (not necessarily tangential) velocity."""
    return _nested_divergence(rate_of_strain, v, x, t, steps, "div E_s")


def stokes_residual(u: AmbientField, pi: AmbientField, x, t: float = 0.0, mu: float = 1.0,
                    steps: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Tangential momentum residual -2 mu P div E_s(u) + grad pi, the load of a manufactured solution."""
    pts, _ = geometry.as_points(x)
    h_out, _ = steps if steps is not None else nested_steps(u.surface, t)
    return -2.0 * mu * strain_divergence(u, pts, t, steps) + grad_surface_scalar(pi, pts, t, h_out / NESTED_OUTER_FACTOR)


def normal_reaction(u_T: AmbientField, pi: AmbientField, x, t: float = 0.0, mu: float = 1.0, rho: float = 1.0,
                    step: Optional[float] = None) -> np.ndarray:
    """
    Normal force b_N = 2 mu tr(H grad u_T) - pi kappa - rho u_T.H u_T that keeps
    the surface in place.
    """
    pts, g = _geom(u_T.surface, x, t)
    G = grad_surface_vector(u_T, pts, t, step)
    u = u_T(pts, t)
    return (2.0 * mu * np.einsum("nij,nji->n", g.H, G)
            - pi(pts, t) * g.kappa
            - rho * np.einsum("ni,nij,nj->n", u, g.H, u))
