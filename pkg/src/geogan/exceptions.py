"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: validation problems exit 2,
I/O problems exit 3, numeric failures exit 4.
"""


class GeoGanError(Exception):
    """Base class for all package errors."""


class ValidationError(GeoGanError, ValueError):
    """Input violates a documented invariant or precondition."""


class TileFormatError(GeoGanError, ValueError):
    """Container file has a bad magic, header, or version."""


class TruncationError(TileFormatError):
    """Container payload is shorter or longer than the header declares."""


class StateError(GeoGanError, RuntimeError):
    """Operation is not valid in the object's current state."""


class NumericError(GeoGanError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InsufficientPatchesError(ValidationError):
    """The built map has too few patches for the requested region mode."""
