"""Exception types raised across the package."""


class RealityGapError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(RealityGapError, ValueError):
    pass


class SingularStiffness(RealityGapError):
    pass


class ContextOutOfRange(RealityGapError, ValueError):
    pass


class ConvergenceFailure(RealityGapError):
    pass


class FrozenViolation(RealityGapError):
    pass


class DivergenceDetected(RealityGapError):
    pass


class InsufficientData(RealityGapError):
    pass


class SchemaInsufficient(RealityGapError):
    pass


class SimulatorUnavailable(RealityGapError):
    pass


class CorruptStore(RealityGapError):
    pass


class EmptyRepository(RealityGapError):
    pass


class ConfigInvalid(RealityGapError, ValueError):
    pass


class MissingInput(RealityGapError, FileNotFoundError):
    pass
