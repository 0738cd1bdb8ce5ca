"""Exception hierarchy shared across the package."""


class OrderLabError(Exception):
    """Base class for every error raised by orderlab."""

    code = "error"


class ShapeError(OrderLabError, ValueError):
    code = "shape"


class InputError(OrderLabError, ValueError):
    code = "input"


class NumericError(OrderLabError, ArithmeticError):
    code = "numeric"


class ConfigError(OrderLabError, ValueError):
    code = "config"


class IngestionError(OrderLabError):
    code = "ingestion"


class TrainingError(OrderLabError):
    code = "training"


class DivergenceError(NumericError):
    code = "divergence"


class StoreError(OrderLabError):
    code = "store"


class CorruptionError(OrderLabError):
    code = "corruption"


class PersistenceError(OrderLabError, OSError):
    code = "persistence"


class DependencyError(OrderLabError):
    """A pipeline stage was invoked before the stage producing its inputs."""

    code = "dependency"
