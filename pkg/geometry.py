"""
Tansurf Geometry Layer
Exact pointwise geometry of analytic closed surfaces given as level sets.

Key Logic:
- Sphere and torus: closed-form signed distance, closest point and Weingarten map.
- Ellipsoid: closest point from a safeguarded Newton solve of the Lagrange
  conditions; Weingarten map is the central-difference Hessian of that distance
  (step = 1e-4 x diameter).
- Evolving surfaces scale about their center with s(t) = 1 + growth_rate * t.
- Outward normals, signed distance negative inside, so kappa = 2/R on a sphere.

Every function takes a single point (3,) or a batch (N, 3) and returns values
with the matching leading shape.
"""
import logging
from typing import List, Tuple

import numpy as np
from scipy.stats import qmc

from errors import ConfigError, NoConvergence, OffSurface, OutOfNeighborhood
from service_models import GeometryEval, LevelSetSurface, SurfaceKind

logger = logging.getLogger("tansurf.geometry")

# --- CONFIG ---
ON_SURFACE_TOL = 1e-10
FOCAL_TOL = 1e-12            # relative distance to a focal set (no unique projection)
BBOX_FACTOR = 2.5            # box half-width in units of the semi-extent
PROJECTION_MAX_ITER = 100
PROJECTION_TOL = 1e-14
HESSIAN_STEP_FACTOR = 1e-4   # ellipsoid Hessian step, times the diameter

_EYE = np.eye(3)


# --- BATCH HELPERS ---

def as_points(x) -> Tuple[np.ndarray, bool]:
    """
    Normalizes a point or point batch to shape (N, 3).

    Returns:
        The (N, 3) array and a flag telling whether the input was a single point.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError(f"expected points with 3 coordinates, got shape {pts.shape}")
    return pts.reshape(-1, 3), single


def unbatch(values: np.ndarray, single: bool) -> np.ndarray:
    return values[0] if single else values


def _center(surface: LevelSetSurface) -> np.ndarray:
    return np.asarray(surface.center, dtype=float)


# --- SCALES ---

def scale_factor(surface: LevelSetSurface, t: float = 0.0) -> float:
    s = 1.0 + surface.growth_rate * t
    if s <= 0.0:
        raise ConfigError(f"surface collapsed: scale factor {s:.3g} at t={t}")
    return s


def semi_extent(surface: LevelSetSurface) -> np.ndarray:
    """Half sizes of the reference (t = 0) surface along x, y, z."""
    if surface.kind == SurfaceKind.SPHERE:
        return np.full(3, surface.radius)
    if surface.kind == SurfaceKind.ELLIPSOID:
        return np.asarray(surface.axes, dtype=float)
    outer = surface.major_radius + surface.minor_radius
    return np.array([outer, outer, surface.minor_radius])


def diameter(surface: LevelSetSurface, t: float = 0.0) -> float:
    return 2.0 * float(semi_extent(surface).max()) * scale_factor(surface, t)


def max_curvature(surface: LevelSetSurface, t: float = 0.0) -> float:
    """Largest principal curvature magnitude ||H||_inf over the surface."""
    if surface.kind == SurfaceKind.SPHERE:
        k = 1.0 / surface.radius
    elif surface.kind == SurfaceKind.ELLIPSOID:
        a = np.asarray(surface.axes, dtype=float)
        k = a.max() / a.min() ** 2
    else:
        R, r = surface.major_radius, surface.minor_radius
        k = max(1.0 / r, 1.0 / (R - r))
    return float(k) / scale_factor(surface, t)


def reach(surface: LevelSetSurface, t: float = 0.0) -> float:
    return 0.5 / max_curvature(surface, t)


def fd_scale(surface: LevelSetSurface, t: float = 0.0) -> float:
    """Length scale for finite-difference steps: min(diameter, 1/||H||_inf)."""
    return min(diameter(surface, t), 1.0 / max_curvature(surface, t))


def bounding_box(surface: LevelSetSurface, t: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    half = BBOX_FACTOR * scale_factor(surface, t) * semi_extent(surface)
    c = _center(surface)
    return c - half, c + half


def in_bbox(surface: LevelSetSurface, x, t: float = 0.0) -> np.ndarray:
    pts, single = as_points(x)
    lo, hi = bounding_box(surface, t)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return unbatch(inside, single)


def check_bbox(surface: LevelSetSurface, pts: np.ndarray, t: float = 0.0, error=OutOfNeighborhood) -> None:
    inside = in_bbox(surface, pts, t)
    if not np.all(inside):
        bad = pts[np.argmin(inside)]
        lo, hi = bounding_box(surface, t)
        raise error(f"point {np.round(bad, 6).tolist()} outside the neighborhood box "
                    f"{np.round(lo, 3).tolist()} .. {np.round(hi, 3).tolist()}")


def killing_axes(surface: LevelSetSurface) -> List[np.ndarray]:
    """
    Rotation axes (through the center) whose rotations are isometries of the surface.
    """
    if surface.kind == SurfaceKind.SPHERE:
        return [e for e in _EYE]
    if surface.kind == SurfaceKind.TORUS:
        return [_EYE[2]]
    a = np.asarray(surface.axes, dtype=float)
    if np.allclose(a, a[0]):
        return [e for e in _EYE]
    for i in range(3):
        others = [a[j] for j in range(3) if j != i]
        if np.isclose(others[0], others[1]):
            return [_EYE[i]]
    return []


# --- REFERENCE-FRAME PROJECTIONS (centered, unscaled) ---

def _sphere_projection(surface, y):
    R = surface.radius
    rho = np.linalg.norm(y, axis=1)
    if np.any(rho < FOCAL_TOL * R):
        raise OutOfNeighborhood("the sphere center has no unique closest point")
    n = y / rho[:, None]
    return rho - R, R * n, n


def _torus_distance(surface, y):
    rho_p = np.hypot(y[:, 0], y[:, 1])
    return np.hypot(rho_p - surface.major_radius, y[:, 2]) - surface.minor_radius


def _torus_projection(surface, y):
    R, r = surface.major_radius, surface.minor_radius
    rho_p = np.hypot(y[:, 0], y[:, 1])
    if np.any(rho_p < FOCAL_TOL * R):
        raise OutOfNeighborhood("points on the torus axis have no unique closest point")
    q = y[:, :2] / rho_p[:, None]
    w = rho_p - R
    rho_t = np.hypot(w, y[:, 2])
    if np.any(rho_t < FOCAL_TOL * r):
        raise OutOfNeighborhood("points on the tube center circle have no unique closest point")
    n = np.column_stack([q * (w / rho_t)[:, None], y[:, 2] / rho_t])
    core = np.column_stack([R * q, np.zeros(len(y))])
    return rho_t - r, core + r * n, n


def _ellipsoid_projection(surface, y):
    """
    Closest point on sum(y_i^2 / a_i^2) = 1 via the secular equation
    F(mu) = sum(a_i^2 y_i^2 / (a_i^2 + mu)^2) - 1 on (-a_min^2, inf).
    F is decreasing and convex there, so Newton from the left converges
    monotonically; bisection takes over whenever a step leaves the bracket.
    """
    a2 = np.asarray(surface.axes, dtype=float) ** 2
    amin2 = a2.min()
    g = np.sum(y ** 2 / a2, axis=1) - 1.0
    outside = g >= 0.0

    def secular(mu):
        denom = a2[None, :] + mu[:, None]
        F = np.sum(a2 * y ** 2 / denom ** 2, axis=1) - 1.0
        dF = -2.0 * np.sum(a2 * y ** 2 / denom ** 3, axis=1)
        return F, dF

    lo = np.where(outside, 0.0, -amin2 * (1.0 - 1e-12))
    hi = np.where(outside, np.sqrt(np.sum(a2 * y ** 2, axis=1)), 0.0)
    F_lo, _ = secular(lo)
    if np.any(~outside & (F_lo <= 0.0)):
        raise OutOfNeighborhood("query lies beyond the focal set of the ellipsoid")

    mu = lo.copy()
    step_old = hi - lo
    for _ in range(PROJECTION_MAX_ITER):
        F, dF = secular(mu)
        pos = F > 0.0
        lo = np.where(pos, mu, lo)
        hi = np.where(pos, hi, mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = mu - F / dF
        bad = (newton < lo) | (newton > hi) | ~np.isfinite(newton) | (np.abs(newton - mu) > 0.5 * step_old)
        bad &= F != 0.0
        nxt = np.where(bad, 0.5 * (lo + hi), newton)
        step_old = np.abs(nxt - mu)
        mu = nxt
        if np.all(step_old <= PROJECTION_TOL * (1.0 + np.abs(mu))):
            break
    else:
        raise NoConvergence(f"ellipsoid projection did not converge in {PROJECTION_MAX_ITER} iterations")

    p = a2 * y / (a2[None, :] + mu[:, None])
    d = np.where(outside, 1.0, -1.0) * np.linalg.norm(y - p, axis=1)
    grad = p / a2
    n = grad / np.linalg.norm(grad, axis=1)[:, None]
    return d, p, n


def _reference_projection(surface, y):
    if surface.kind == SurfaceKind.SPHERE:
        return _sphere_projection(surface, y)
    if surface.kind == SurfaceKind.TORUS:
        return _torus_projection(surface, y)
    return _ellipsoid_projection(surface, y)


def _project(surface: LevelSetSurface, pts: np.ndarray, t: float):
    check_bbox(surface, pts, t)
    s = scale_factor(surface, t)
    c = _center(surface)
    d, p, n = _reference_projection(surface, (pts - c) / s)
    d = s * d
    limit = reach(surface, t)
    if np.any(d < -limit):
        worst = float(d.min())
        raise OutOfNeighborhood(f"interior point at depth {-worst:.4g} beyond reach {limit:.4g}")
    return d, c + s * p, n


# --- PUBLIC OPERATIONS ---

def signed_distance(surface: LevelSetSurface, x, t: float = 0.0) -> np.ndarray:
    """
    Signed distance d(x, t), negative inside the enclosed volume.

    Raises:
        OutOfNeighborhood: x is outside the bounding box.
    """
    pts, single = as_points(x)
    check_bbox(surface, pts, t)
    s = scale_factor(surface, t)
    y = (pts - _center(surface)) / s
    if surface.kind == SurfaceKind.SPHERE:
        d = np.linalg.norm(y, axis=1) - surface.radius
    elif surface.kind == SurfaceKind.TORUS:
        d = _torus_distance(surface, y)
    else:
        d, _, _ = _ellipsoid_projection(surface, y)
    return unbatch(s * d, single)


def closest_point(surface: LevelSetSurface, x, t: float = 0.0) -> np.ndarray:
    """
    Closest point p(x, t) = x - d(x, t) n(p, t).

    Raises:
        OutOfNeighborhood: outside the box, past the reach on the concave side, or on a focal set.
        NoConvergence: ellipsoid projection failed to converge.
    """
    pts, single = as_points(x)
    _, p, _ = _project(surface, pts, t)
    return unbatch(p, single)


def hessian_fd(surface: LevelSetSurface, x, t: float = 0.0, step: float = None) -> np.ndarray:
    """
    19-point central-difference Hessian of the signed distance.
    Used as the ellipsoid Weingarten map and as an oracle for the analytic kinds.
    """
    pts, single = as_points(x)
    h = step if step is not None else HESSIAN_STEP_FACTOR * diameter(surface, t)
    offsets = [np.zeros(3)]
    for i in range(3):
        offsets += [h * _EYE[i], -h * _EYE[i]]
    pairs = [(i, j) for i in range(3) for j in range(i + 1, 3)]
    for i, j in pairs:
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            offsets.append(h * (si * _EYE[i] + sj * _EYE[j]))
    offsets = np.asarray(offsets)
    stencil = pts[:, None, :] + offsets[None, :, :]
    d = np.asarray(signed_distance(surface, stencil.reshape(-1, 3), t)).reshape(len(pts), len(offsets))

    hess = np.empty((len(pts), 3, 3))
    for i in range(3):
        hess[:, i, i] = (d[:, 1 + 2 * i] - 2.0 * d[:, 0] + d[:, 2 + 2 * i]) / h ** 2
    for k, (i, j) in enumerate(pairs):
        base = 7 + 4 * k
        mixed = (d[:, base] - d[:, base + 1] - d[:, base + 2] + d[:, base + 3]) / (4.0 * h ** 2)
        hess[:, i, j] = mixed
        hess[:, j, i] = mixed
    return unbatch(hess, single)


def _weingarten(surface: LevelSetSurface, p: np.ndarray, n: np.ndarray, t: float) -> np.ndarray:
    s = scale_factor(surface, t)
    P = _EYE[None] - n[:, :, None] * n[:, None, :]
    if surface.kind == SurfaceKind.SPHERE:
        return P / (surface.radius * s)
    if surface.kind == SurfaceKind.TORUS:
        R, r = surface.major_radius, surface.minor_radius
        y = (p - _center(surface)) / s
        rho_p = np.hypot(y[:, 0], y[:, 1])
        e_phi = np.column_stack([-y[:, 1] / rho_p, y[:, 0] / rho_p, np.zeros(len(y))])
        e_m = np.cross(n, e_phi)
        k_m = 1.0 / (r * s)
        k_phi = (rho_p - R) / (r * rho_p * s)
        return (k_m * e_m[:, :, None] * e_m[:, None, :]
                + k_phi[:, None, None] * e_phi[:, :, None] * e_phi[:, None, :])
    raw = hessian_fd(surface, p, t)
    raw = 0.5 * (raw + np.swapaxes(raw, 1, 2))
    return P @ raw @ P


def _bundle(d, p, n, H) -> GeometryEval:
    P = _EYE[None] - n[:, :, None] * n[:, None, :]
    kappa = np.trace(H, axis1=1, axis2=2)
    K = 0.5 * (kappa ** 2 - np.trace(H @ H, axis1=1, axis2=2))
    return GeometryEval(d=d, p=p, n=n, P=P, H=H, kappa=kappa, K=K)


def evaluate(surface: LevelSetSurface, x, t: float = 0.0) -> GeometryEval:
    """
    Geometry at neighborhood points: d(x) plus the surface quantities at p(x).
    Batched input only; use `shape_operator` for the single-point form.
    """
    pts, _ = as_points(x)
    d, p, n = _project(surface, pts, t)
    return _bundle(d, p, n, _weingarten(surface, p, n, t))


def shape_operator(surface: LevelSetSurface, x, t: float = 0.0) -> GeometryEval:
    """
    Fills every GeometryEval field at on-surface points.

    Raises:
        OffSurface: |d(x)| > 1e-10 for some input point.
    """
    pts, single = as_points(x)
    geom = evaluate(surface, pts, t)
    off = np.abs(geom.d)
    if np.any(off > ON_SURFACE_TOL):
        raise OffSurface(f"point is {off.max():.3e} away from the surface")
    if not single:
        return geom
    return GeometryEval(**{name: value[0] for name, value in geom.__dict__.items()})


def principal_curvatures(geom: GeometryEval) -> np.ndarray:
    """
    The two tangential eigenvalues of H in descending order, shape (N, 2).
    """
    H = np.atleast_3d(geom.H) if geom.H.ndim == 3 else geom.H[None]
    n = geom.n if geom.n.ndim == 2 else geom.n[None]
    vals, vecs = np.linalg.eigh(H)
    normal_idx = np.argmax(np.abs(np.einsum("nij,ni->nj", vecs, n)), axis=1)
    keep = np.ones(vals.shape, dtype=bool)
    keep[np.arange(len(vals)), normal_idx] = False
    tangential = vals[keep].reshape(len(vals), 2)
    return tangential[:, ::-1]


def tangent_pseudoinverse(H: np.ndarray, n: np.ndarray) -> np.ndarray:
    """H restricted to the tangent plane, inverted there: (H + n n^T)^-1 - n n^T."""
    nn = n[..., :, None] * n[..., None, :]
    return np.linalg.inv(H + nn) - nn


def sample_points(surface: LevelSetSurface, count: int, seed: int = 0, t: float = 0.0) -> np.ndarray:
    """
    Quasi-random on-surface points from a scrambled 2-D Halton sequence.
    """
    uv = qmc.Halton(d=2, scramble=True, seed=seed).random(count)
    s = scale_factor(surface, t)
    c = _center(surface)
    if surface.kind == SurfaceKind.TORUS:
        R, r = surface.major_radius, surface.minor_radius
        phi, theta = 2.0 * np.pi * uv[:, 0], 2.0 * np.pi * uv[:, 1]
        ring = R + r * np.cos(theta)
        y = np.column_stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)])
        return c + s * y
    z = 1.0 - 2.0 * uv[:, 0]
    phi = 2.0 * np.pi * uv[:, 1]
    ring = np.sqrt(np.clip(1.0 - z ** 2, 0.0, None))
    direction = np.column_stack([ring * np.cos(phi), ring * np.sin(phi), z])
    if surface.kind == SurfaceKind.SPHERE:
        return c + s * surface.radius * direction
    return c + s * np.asarray(surface.axes) * direction
