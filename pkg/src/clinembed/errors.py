"""Exception hierarchy shared by every module."""


class ClinEmbedError(Exception):
    """Base class for all package errors."""


class ShapeError(ClinEmbedError):
    pass


class NumericError(ClinEmbedError):
    """Raised when an operation produces NaN/Inf or training diverges."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ContractError(ClinEmbedError):
    pass


class ConfigError(ClinEmbedError):
    pass


class SchemaError(ClinEmbedError):
    pass


class DataError(ClinEmbedError):
    pass


class MetricError(ClinEmbedError):
    pass


class IoError(ClinEmbedError, OSError):
    pass
