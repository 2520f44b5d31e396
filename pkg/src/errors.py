class UniqueContinuationError(Exception):
    """Base class for every error raised by the solver pipeline."""


class ConfigurationError(UniqueContinuationError, ValueError):
    pass


class DataError(UniqueContinuationError, ValueError):
    pass


class DomainError(UniqueContinuationError, ValueError):
    pass


class StructuralError(UniqueContinuationError, RuntimeError):
    pass


class DegenerateLevelsetError(UniqueContinuationError, RuntimeError):
    pass


class NumericalDegeneracyError(UniqueContinuationError, RuntimeError):
    pass


class GeometryError(UniqueContinuationError, RuntimeError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class MeshTooCoarseError(UniqueContinuationError, RuntimeError):
    pass


class SolverError(UniqueContinuationError, RuntimeError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class StageError(UniqueContinuationError, RuntimeError):
    """
    Wraps a pipeline failure with the stage and refinement level it happened at.
    """
    def __init__(self, stage, level, cause):
        super().__init__(f"{stage} failed at level {level}: {cause}")
        self.stage = stage
        self.level = level
        self.cause = cause
