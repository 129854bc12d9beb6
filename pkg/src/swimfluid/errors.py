"""Exception types shared across the simulator."""


class SwimfluidError(Exception):
    """Base class for all simulator errors."""


class GeometryViolation(SwimfluidError):
    """A body escaped the domain, two bodies overlap, or a body vanished from the grid."""

    def __init__(self, message, body=None, time=None):
        super().__init__(message)
        self.body = body
        self.time = time


class DegenerateLinkError(SwimfluidError):
    """Two adjacent body centers (nearly) coincide."""

    def __init__(self, message, link=None):
        super().__init__(message)
        self.link = link


class BodyCollisionError(SwimfluidError):
    """Rasterized body indicators overlap."""


class DimensionError(SwimfluidError):
    """Fields live on different grids or have the wrong dimension."""


class SolverError(SwimfluidError):
    """A linear solve failed to reach its residual tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CFLError(SwimfluidError):
    """Time step violates the advective CFL limit."""

    def __init__(self, message, admissible_dt):
        super().__init__(message)
        self.admissible_dt = admissible_dt


class DivergenceError(SwimfluidError):
    """Non-finite values appeared in a trajectory."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class NeedsInteriorTimeError(SwimfluidError):
    """A central time difference was requested at a trajectory endpoint."""


class ParameterError(SwimfluidError):
    """Nonpositive or otherwise invalid numeric parameters."""


class ConfigError(SwimfluidError):
    """Configuration file could not be parsed or validated."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
