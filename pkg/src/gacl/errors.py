"""Exception types shared across the library."""


class GaclError(Exception):
    """Base class for library errors."""


class ConfigError(GaclError, ValueError):
    """Invalid configuration value or combination."""


class DimensionError(GaclError, ValueError):
    """Shape or size mismatch in numeric inputs."""


class DomainError(GaclError, ValueError):
    """Numeric argument outside its valid domain."""


class DataError(GaclError, ValueError):
    """Malformed or degenerate data (empty sets, zero variance, bad records)."""


class StateError(GaclError, RuntimeError):
    """Operation invoked in an invalid order (e.g. backward without cache)."""


class TrainingDiverged(GaclError, RuntimeError):
    """Loss became non-finite during training."""
