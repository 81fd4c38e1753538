"""Exception hierarchy.

``ConfigError`` subclasses map to exit code 2 in the CLI, ``NumericalError``
subclasses to exit code 1.
"""


class GpMiaError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GpMiaError):
    pass


class NumericalError(GpMiaError):
    pass


class DimensionMismatch(GpMiaError, ValueError):
    pass


class NotSymmetric(NumericalError, ValueError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class NonConvergence(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateKernel(NumericalError):
    pass


class EmptyDataset(ConfigError, ValueError):
    pass


class LabelOutOfRange(ConfigError, ValueError):
    pass


class InvalidFractions(ConfigError, ValueError):
    pass


class InsufficientSamples(ConfigError, ValueError):
    pass


class InsufficientData(ConfigError, ValueError):
    pass


class MissingNtkContext(ConfigError):
    pass


class SingleClass(ConfigError, ValueError):
    pass


class NoPositives(ConfigError, ValueError):
    pass


class NoNegatives(ConfigError, ValueError):
    pass


class FeatureSchemaMismatch(ConfigError):
    def __init__(self, missing=(), extra=()):
        self.missing = list(missing)
        self.extra = list(extra)
        parts = []
        if self.missing:
            parts.append("missing columns: " + ", ".join(self.missing))
        if self.extra:
            parts.append("unexpected columns: " + ", ".join(self.extra))
        super().__init__("feature schema mismatch; " + "; ".join(parts or ["order differs"]))


class MissingModel(ConfigError):
    pass


class FingerprintMismatch(ConfigError):
    pass
