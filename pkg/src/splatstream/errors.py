"""Exception types shared across the package."""


class SplatStreamError(Exception):
    pass


class DimensionError(SplatStreamError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(SplatStreamError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class ContractError(SplatStreamError, ValueError):
    """A documented precondition on argument values was violated."""


class StateError(SplatStreamError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class FormatError(SplatStreamError, ValueError):
    """A file on disk does not match its expected binary or text layout."""

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset
