"""
Tansurf Service Models
Defines the Pydantic schemas and Enums shared by every layer: surface
descriptions, geometry bundles, verification and solve reports, and the
experiment configuration read by the CLI.
"""
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Vec3 = Tuple[float, float, float]


class SurfaceKind(str, Enum):
    SPHERE = "sphere"
    ELLIPSOID = "ellipsoid"
    TORUS = "torus"


class Arity(str, Enum):
    SCALAR = "scalar"
    VECTOR3 = "vector3"
    MATRIX3 = "matrix3"


class ExtensionMode(str, Enum):
    """
    How an ambient field is evaluated off the surface.
    """
    GIVEN_ON_NEIGHBORHOOD = "given_on_neighborhood"
    NORMAL_EXTEND = "normal_extend"  # f(x) = f(p(x))


class IdentityId(str, Enum):
    """
    The identity catalog checked by `identities.verify_identity`.
    """
    PRODUCT_RULES = "product_rules"
    DIV_GRAD_TRANSPOSE = "div_grad_transpose"
    DIV_GRAD_TRANSPOSE_NORMAL = "div_grad_transpose_normal"
    WEINGARTEN_DIVERGENCE = "weingarten_divergence"
    DIV_GRAD_TRANSPOSE_GAUSS = "div_grad_transpose_gauss"
    NORMAL_RATE = "normal_rate"
    PROJECTOR_RATE = "projector_rate"
    WEINGARTEN_TANGENT = "weingarten_tangent"
    INEXTENSIBILITY = "inextensibility"
    PRESSURE_STRESS_DIVERGENCE = "pressure_stress_divergence"
    STRAIN_SPLIT = "strain_split"
    STRAIN_DIVERGENCE = "strain_divergence"
    STRAIN_DIVERGENCE_INEXTENSIBLE = "strain_divergence_inextensible"
    CAYLEY_HAMILTON = "cayley_hamilton"
    WEINGARTEN_PSEUDOINVERSE = "weingarten_pseudoinverse"
    LEIBNIZ = "leibniz"
    STOKES_FORMULA = "stokes_formula"
    STRAIN_BOCHNER = "strain_bochner"
    KORN_SPLIT = "korn_split"


class FieldFamily(str, Enum):
    """
    Test-field families fed to the identity checks.
    """
    GEOMETRY = "geometry"                          # identity involves geometry only
    AMBIENT_POLYNOMIAL = "ambient-polynomial"      # w, not tangential
    TANGENTIAL_POLYNOMIAL = "tangential-polynomial"  # P w
    TANGENTIAL_CUBIC = "tangential-cubic"          # P (y1^3, y2^3/2, y3)
    ROTATION = "rotation"                          # a x (y), Killing where it exists
    SURFACE_CURL = "surface-curl"                  # n x grad psi, divergence free
    INEXTENSIBLE = "inextensible"                  # div u_T = -u_N kappa
    SCALING = "scaling"                            # pure normal growth
    SCALING_SWIRL = "scaling-swirl"                # normal growth plus tangential swirl


class FormVariant(str, Enum):
    A_TANGENTIAL = "a-tangential"
    A_FULL = "a-full"
    A_TAU = "a-tau"
    A_HAT_TAU = "a-hat-tau"


class StrainRoute(str, Enum):
    FACTORED = "factored"  # E_s(u_T) + u_N H
    DIRECT = "direct"      # E_s(u)


class Formulation(str, Enum):
    TANGENTIAL = "tangential"
    MULTIPLIER = "multiplier"
    AUGMENTED_TANGENTIAL = "augmented-tangential"
    AUGMENTED_FULL = "augmented-full"


class RhsPairing(str, Enum):
    TANGENTIAL = "tangential"  # f(v_T)
    FULL = "full"              # f(v)


class PressureKind(str, Enum):
    LINEAR = "linear"
    CONSTANT = "constant"


class ManufacturedFamily(str, Enum):
    CURL_XYZ = "curl-xyz"
    PRESSURE_ONLY = "pressure-only"
    KILLING = "killing"
    KILLING_LOAD = "killing-load"


class Command(str, Enum):
    VERIFY = "verify"
    SOLVE = "solve"
    CONVERGENCE = "convergence"
    TAU_SWEEP = "tau-sweep"
    CONSTANTS = "constants"


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class LevelSetSurface(BaseModel):
    """
    Analytic closed surface. Only the fields of the chosen `kind` are used.
    The surface evolves by scaling about `center` with s(t) = 1 + growth_rate * t.
    """
    model_config = ConfigDict(use_enum_values=True, frozen=True)

    kind: SurfaceKind
    radius: float = 1.0                  # sphere
    axes: Vec3 = (1.0, 1.0, 1.0)         # ellipsoid semi-axes
    major_radius: float = 2.0            # torus R
    minor_radius: float = 0.5            # torus r
    center: Vec3 = (0.0, 0.0, 0.0)
    growth_rate: float = 0.0

    @model_validator(mode="after")
    def _check_dimensions(self):
        if self.radius <= 0.0:
            raise ValueError("sphere radius must be positive")
        if min(self.axes) <= 0.0:
            raise ValueError("ellipsoid semi-axes must be positive")
        if self.minor_radius <= 0.0 or self.major_radius <= self.minor_radius:
            raise ValueError("torus needs 0 < minor_radius < major_radius")
        return self

    @classmethod
    def sphere(cls, radius: float = 1.0, center: Vec3 = (0.0, 0.0, 0.0), growth_rate: float = 0.0):
        return cls(kind=SurfaceKind.SPHERE, radius=radius, center=center, growth_rate=growth_rate)

    @classmethod
    def ellipsoid(cls, a: float, b: float, c: float, center: Vec3 = (0.0, 0.0, 0.0)):
        return cls(kind=SurfaceKind.ELLIPSOID, axes=(a, b, c), center=center)

    @classmethod
    def torus(cls, major: float = 2.0, minor: float = 0.5, center: Vec3 = (0.0, 0.0, 0.0)):
        return cls(kind=SurfaceKind.TORUS, major_radius=major, minor_radius=minor, center=center)


class GeometryEval(BaseModel):
    """
    Per-point geometry bundle. For off-surface queries n, P, H, kappa, K are
    the values at the closest point (normal extension).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    d: np.ndarray
    p: np.ndarray
    n: np.ndarray
    P: np.ndarray
    H: np.ndarray
    kappa: np.ndarray
    K: np.ndarray


# ---------------------------------------------------------------------------
# Identity verification
# ---------------------------------------------------------------------------

class IdentityRequest(BaseModel):
    model_config = ConfigDict(use_enum_values=True)

    identity_id: IdentityId
    surface: Optional[LevelSetSurface] = None   # falls back to the config surface
    field_family: Optional[FieldFamily] = None  # falls back to the identity default
    samples: int = Field(default=200, gt=0)
    fd_step: Optional[float] = Field(default=None, gt=0.0)


class ResidualSample(BaseModel):
    index: int
    point: Vec3
    rel_residual: float
    abs_residual: float


class IdentityCheckReport(BaseModel):
    model_config = ConfigDict(use_enum_values=True)

    identity_id: IdentityId
    surface: LevelSetSurface
    field_family: FieldFamily
    sample_count: int
    max_rel_residual: float
    max_abs_residual: float
    max_scaled_residual: float
    tolerance: float
    passed: bool
    fd_step: float
    per_point: List[ResidualSample] = []
    worst_indices: List[int] = []   # largest absolute residual first


# ---------------------------------------------------------------------------
# Solver reports
# ---------------------------------------------------------------------------

class ErrorNorms(BaseModel):
    velocity_h1: float
    velocity_l2: float
    pressure_l2: Optional[float] = None


class ConstantsReport(BaseModel):
    korn_h: Optional[float] = None
    korn_h_unconstrained: Optional[float] = None
    infsup_h: Optional[float] = None


class SolveReport(BaseModel):
    """
    Result of one saddle-point solve. Solution arrays stay out of JSON dumps.
    """
    model_config = ConfigDict(use_enum_values=True, arbitrary_types_allowed=True)

    formulation: Formulation
    level: int
    h: float
    velocity_dofs: int
    pressure_dofs: int
    multiplier_dofs: Optional[int] = None
    killing_rows: int = 0
    residual_norm: float
    u_N_l2: float
    rhs_killing_correction: float = 0.0
    errors: Optional[ErrorNorms] = None
    constants: Optional[ConstantsReport] = None
    velocity: Optional[np.ndarray] = Field(default=None, exclude=True)
    pressure: Optional[np.ndarray] = Field(default=None, exclude=True)
    multiplier: Optional[np.ndarray] = Field(default=None, exclude=True)


class TauSweepRow(BaseModel):
    tau: float
    tangential_error_h1: float      # ||P w||_1 of the consistency gap w
    penalty_error: float            # sqrt(||P w||_1^2 + tau / (2 mu) ||w.n||^2)
    normalized_error: float         # penalty_error / ||P u||_1 of the reference
    gap_normal_l2: float
    raw_gap_h1: float               # ||P (u_hat - u)||_1, reference residue included
    normal_l2: float
    reference_normal_l2: float


class TauSweepReport(BaseModel):
    level: int
    mu: float
    threshold: float
    slope: float
    tangential_slope: float
    raw_slope: float
    normal_slope: float
    rows: List[TauSweepRow]
    passed: bool


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

class ExperimentConfig(BaseModel):
    """
    Configuration for one CLI run, parsed from the --config JSON file.
    """
    model_config = ConfigDict(use_enum_values=True)

    command: Command = Command.SOLVE
    surface: LevelSetSurface = LevelSetSurface(kind=SurfaceKind.SPHERE)
    levels: List[int] = [1]
    formulation: Formulation = Formulation.MULTIPLIER
    mu: float = 1.0
    rho: float = 1.0
    tau: float = 1.0e3
    taus: List[float] = [1.0e2, 1.0e3, 1.0e4, 1.0e5]
    family: ManufacturedFamily = ManufacturedFamily.CURL_XYZ
    pressure_space: PressureKind = PressureKind.LINEAR
    identities: List[IdentityRequest] = []
    samples: int = Field(default=200, gt=0)
    fd_step: Optional[float] = Field(default=None, gt=0.0)
    seed: int = 0
    killing_tol: float = Field(default=0.1, gt=0.0)
    estimate_constants: bool = False
    out_dir: Optional[str] = None

    @field_validator("levels")
    @classmethod
    def _levels_increasing(cls, levels: List[int]) -> List[int]:
        if not levels:
            raise ValueError("levels must be nonempty")
        if any(level < 0 for level in levels):
            raise ValueError("levels must be nonnegative")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("levels must be strictly increasing")
        return levels

    @field_validator("taus")
    @classmethod
    def _taus_positive(cls, taus: List[float]) -> List[float]:
        if not taus or any(tau <= 0.0 for tau in taus):
            raise ValueError("tau list must be nonempty and positive")
        return sorted(taus)

    @field_validator("mu")
    @classmethod
    def _mu_positive(cls, mu: float) -> float:
        if mu <= 0.0:
            raise ValueError("mu must be positive")
        return mu

    @field_validator("tau")
    @classmethod
    def _tau_positive(cls, tau: float) -> float:
        if tau <= 0.0:
            raise ValueError("tau must be positive")
        return tau


class Provenance(BaseModel):
    config_sha256: str
    fd_steps: Dict[str, float] = {}
    tolerances: Dict[str, float] = {}


class RunMetadata(BaseModel):
    command: str
    started_at: str
    finished_at: str
    threads: int
    exit_code: int
