"""Exception types shared across the package."""


class PoolcalError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PoolcalError):
    """Input data violates the CSV schema or a dataset invariant."""


class CalibrationError(PoolcalError):
    """A study's calibration subset cannot support a calibration fit."""


class SeparationError(CalibrationError):
    """Quasi-complete separation detected while fitting a calibration model."""


class EnumerationLimitError(PoolcalError):
    """A stratum is too large for exact enumeration of category assignments."""


class RankDefectError(PoolcalError):
    """The stacked information matrix is singular."""
