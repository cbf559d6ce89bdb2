"""Exception hierarchy shared across the package."""


class ThermoSlamError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ThermoSlamError):
    pass


class InsufficientDataError(ThermoSlamError):
    pass


class EstimationFailedError(ThermoSlamError):
    pass


class DegenerateGeometryError(ThermoSlamError):
    pass


class NonPositiveDisparityError(ThermoSlamError):
    pass


class AlignFailedError(ThermoSlamError):
    pass


class FilterUnavailableError(ThermoSlamError):
    """Dynamic filtering could not run; caller should keep all tracked points."""


class SamplingFailedError(ThermoSlamError):
    pass


class ParseError(ThermoSlamError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (record {line})"
        super().__init__(message)
        self.line = line


class ConfigError(ThermoSlamError):
    pass


class IngestionError(ThermoSlamError):
    pass


class InsufficientOverlapError(ThermoSlamError):
    pass
