"""Error types raised by the density pipeline."""


class DensityError(Exception):
    """Base class for every error raised by this package."""


class DataFormatError(DensityError, ValueError):
    """A file on disk is malformed or has the wrong magic/header."""


class ShapeMismatchError(DensityError, ValueError):
    """Array or raster shapes do not agree."""


class ConfigError(DensityError, ValueError):
    """Configuration or hyperparameters violate a constraint."""


class DivergenceError(DensityError, ArithmeticError):
    """The optimizer hit a non-finite objective (step size too large)."""


class CompatibilityError(DensityError):
    """A model and a dataset were produced with different feature settings."""


class SvdError(DensityError, ArithmeticError):
    """The singular value decomposition did not converge."""
