class LandmarkError(Exception):
    """Base class for every error raised by the landmark toolkit"""


class ConfigError(LandmarkError, ValueError):
    """Invalid configuration or command-line input"""


class DataError(LandmarkError, ValueError):
    """Malformed, missing or inconsistent data files"""


class ShapeError(DataError):
    """Array shapes that do not fit together"""


class NumericalError(LandmarkError, ArithmeticError):
    """A computation produced an unusable result"""


class SingularSystemError(NumericalError):
    """Linear system singular or too ill-conditioned to trust"""


class NonFiniteError(NumericalError):
    """NaN or Inf detected in values or gradients"""
