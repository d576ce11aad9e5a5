"""Exception types shared across the package."""


class NetshrinkError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NetshrinkError, ValueError):
    """An array has the wrong rank or extent; the message names the offending axis."""


class GridError(NetshrinkError, ValueError):
    """A width/kernel value is outside the layer's allowed grid, or the grid itself is invalid."""


class StateError(NetshrinkError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class LookupMissError(NetshrinkError, KeyError):
    """A latency table has no entry for the requested (layer, M, k)."""


class FeasibilityError(NetshrinkError, RuntimeError):
    """No sample meeting the resource bound could be generated."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class InfeasibleTargetError(NetshrinkError, ValueError):
    """The search target cannot be met by any choice in the search space."""


class ConfigError(NetshrinkError, ValueError):
    """An experiment config is malformed; the message names the offending field."""


class ParseError(NetshrinkError, ValueError):
    """A binary/JSON artifact could not be parsed; the message includes the byte offset."""
