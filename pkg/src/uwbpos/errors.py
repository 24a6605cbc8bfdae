"""Exception hierarchy shared by all modules."""


class UwbError(Exception):
    """Base class for all errors raised by uwbpos."""


class UndersampledError(UwbError, ValueError):
    """Sample rate too low for the requested pulse."""


class MaskCoverageError(UwbError, ValueError):
    """Emission mask does not cover the occupied band of a signal."""


class NoDetectionError(UwbError):
    """A threshold detector never fired inside its search window."""


class InconsistentGeometryError(UwbError, ValueError):
    """Measured delays cannot be produced by any real arrival angle."""


class EndfireError(UwbError, ValueError):
    """AOA bound is unbounded at endfire (cos(alpha) == 0)."""


class DegenerateGeometryError(UwbError):
    """Normal equations are singular (collinear anchors, parallel bearings)."""


class UnderdeterminedError(UwbError, ValueError):
    """Too few measurements to fix a 2-D position."""


class DivergedError(UwbError):
    """Iterative solver produced a non-finite residual."""


class ScenarioError(UwbError, ValueError):
    """Scenario file failed to parse or validate.

    ``field`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
