class DRGANError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(DRGANError, ValueError):
    exit_code = 2


class ConfigurationError(DRGANError, ValueError):
    exit_code = 2


class IngestionError(DRGANError):
    exit_code = 2

    def __init__(self, message, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


class StateError(DRGANError, RuntimeError):
    exit_code = 2


class NumericError(DRGANError, ArithmeticError):
    """A non-finite value showed up in a loss or a metric input."""

    exit_code = 3

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
