"""Exception hierarchy shared across the package.

Each class maps to one failure category surfaced by the CLI exit codes:
configuration (2), data (3), training (4). Dimension/numeric/routing errors
are programming or state errors and bubble up as-is.
"""


class SkillRouteError(Exception):
    pass


class DimensionError(SkillRouteError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigurationError(SkillRouteError, ValueError):
    """Invalid experiment, strategy, or model configuration."""


class DataError(SkillRouteError, ValueError):
    """Malformed or insufficient task data."""


class RoutingError(SkillRouteError, KeyError):
    """Unknown task or unresolvable routing state."""


class NumericError(SkillRouteError, ArithmeticError):
    """NaN/Inf encountered in a forward value."""


class TrainingError(SkillRouteError, RuntimeError):
    """Optimization diverged or otherwise failed."""
