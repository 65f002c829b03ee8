"""Exception types shared across glue-lab."""


class GlueLabError(Exception):
    """Base class for all glue-lab failures."""


class ConfigError(GlueLabError):
    """Invalid or inconsistent configuration."""


class GeometryError(ConfigError):
    """Target geometry violates a construction invariant."""


class TransportTooFar(GlueLabError):
    """Points are farther apart than the transport-validity radius."""


class SingularTransport(GlueLabError):
    """Complex-linear transport matrix is numerically singular."""


class GridMismatch(ConfigError):
    """Grid parameters are not aligned or the truncation is too short."""


class DomainKindMismatch(GlueLabError):
    """Operation called on a domain of the wrong kind."""


class DomainMismatch(GlueLabError):
    """Sections live on different domains or base maps."""


class GridTooSmall(GlueLabError):
    """Not enough nodes for the requested finite-difference stencil."""


class BoundaryViolation(GlueLabError):
    """Map does not satisfy the Lagrangian boundary condition."""


class FiberMismatch(GlueLabError):
    """Asymptotic values of the two pieces disagree."""


class NoConvergence(GlueLabError):
    """Iteration did not reach its tolerance."""


class LinearSolveFailure(GlueLabError):
    """Sparse linear solve failed or returned non-finite values."""


class TransversalityFailure(GlueLabError):
    """Linearized operator is not surjective modulo the obstruction space."""


class InsufficientPoints(GlueLabError):
    """Too few samples for a finite difference or a fit."""


class DegenerateFit(GlueLabError):
    """All values are below the fitting floor."""
