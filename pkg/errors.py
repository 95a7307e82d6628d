"""
Tansurf Error Types
Every failure the library raises on purpose derives from `TansurfError`, so the
CLI can report it, mark the sub-experiment as failed and keep going.
"""


class TansurfError(Exception):
    """Base class for all expected tansurf failures."""


class ConfigError(TansurfError):
    """Invalid experiment configuration or CLI input."""


# GEOMETRY
class OutOfNeighborhood(TansurfError):
    """Query point outside the tubular neighborhood of the surface."""


class OffSurface(TansurfError):
    """A surface-only operation received a point with |phi| above tolerance."""


class NoConvergence(TansurfError):
    """The closest-point iteration ran out of iterations."""


# CALCULUS
class StencilOutOfNeighborhood(OutOfNeighborhood):
    """A finite-difference stencil left the tubular neighborhood."""


class HypothesisViolated(TansurfError):
    """Test fields do not satisfy the hypotheses of the identity being checked."""


# ASSEMBLY / SOLVE
class InvalidTau(TansurfError):
    """Augmentation parameter must be strictly positive."""


class SingularSystem(TansurfError):
    """Factorization broke down; usually a missing gauge or Killing constraint."""


class InconsistentRhs(TansurfError):
    """Load is not orthogonal to the Killing fields (rigid surface motions)."""


class TooLarge(TansurfError):
    """Dense eigenproblem above the configured size cap."""


class BelowThreshold(TansurfError):
    """Augmentation parameter at or below the coercivity threshold."""
