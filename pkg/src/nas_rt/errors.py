"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class ArgumentError(ValueError):
    """Operation called with a structurally invalid argument."""


class ConfigError(ValueError):
    """Configuration violates a documented invariant."""


class DataError(ValueError):
    """Dataset or label content is unusable (empty set, label out of range)."""


class TableLookupError(LookupError):
    """Latency table has no entry for the requested operator signature."""


class FormatError(ValueError):
    """On-disk artifact is malformed; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DecodeError(ValueError):
    """Decoded or imported architecture violates a structural invariant."""
