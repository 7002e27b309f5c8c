"""Exception hierarchy shared across the package."""


class V1TError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(V1TError):
    """Shape or axis mismatch."""


class ConfigError(V1TError):
    """Invalid or inconsistent configuration."""


class DataError(V1TError):
    """Dataset files missing, malformed, or failing validation."""


class NumericalError(V1TError):
    """NaN/Inf encountered or a numerical-domain violation."""
