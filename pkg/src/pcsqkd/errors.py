"""Exception hierarchy shared by all modules."""


class QKDError(Exception):
    """Base class for every error raised by :mod:`pcsqkd`."""


class DomainError(QKDError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConstellationShapeError(DomainError):
    """QAM order is not a square of an even power of two."""


class TruncationError(QKDError):
    """Fock-space truncation leaves too much probability mass behind."""

    def __init__(self, message, tail_mass=None):
        super().__init__(message)
        self.tail_mass = tail_mass


class ValidityError(QKDError):
    """A density matrix is not a valid quantum state."""


class OptimizationError(QKDError):
    """Scalar optimizer failed; ``best`` carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class UnphysicalStateError(QKDError):
    """A covariance matrix violates the uncertainty principle."""


class ModelError(UnphysicalStateError):
    """Channel parameters do not describe a physical Gaussian state."""


class ParameterError(DomainError):
    """Invalid DSP or framing parameter."""


class FrameLengthError(ParameterError):
    pass


class SyncError(QKDError):
    """No preamble correlation peak above the detection threshold."""


class EqualizerDivergenceError(QKDError):
    pass


class AmbiguousCFOError(QKDError):
    pass


class CalibrationError(QKDError):
    pass


class EstimationPrecisionError(QKDError):
    """Too few revealed symbols for parameter estimation."""
