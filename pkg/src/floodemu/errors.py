"""Exception types shared across the toolkit."""


class FloodemuError(Exception):
    """Base class for all toolkit errors."""


class GridParseError(FloodemuError):
    """Malformed ASCII grid input (bad header, token, or cell count)."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class GridCompatibilityError(FloodemuError):
    """Two rasters do not share shape / cellsize / origin."""


class AlignmentError(FloodemuError):
    """Time series or matrices that must share a time base / row count do not."""


class NumericalBlowupError(FloodemuError):
    """NaN/Inf detected in a solver field."""

    def __init__(self, message, cell=None, time=None):
        super().__init__(message)
        self.cell = cell
        self.time = time


class InstabilityError(FloodemuError):
    """Adaptive time step collapsed; the run cannot continue."""


class ConvergenceError(FloodemuError):
    """Iterative optimisation failed to reach its tolerance."""


class DivergenceError(FloodemuError):
    """Training loss became NaN/Inf."""


class ModelIOError(FloodemuError):
    """Corrupt, truncated, or incompatible model/matrix file."""


class ManifestError(FloodemuError):
    """Missing or inconsistent sidecar manifest information."""
