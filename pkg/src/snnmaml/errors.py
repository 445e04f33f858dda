"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``snnmaml.harness.cli``).
"""


class StructuralError(ValueError):
    """Shapes, indices or sizes that do not fit together."""


class FormatError(ValueError):
    """Malformed serialized data (event files, checkpoints, manifests)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid run configuration, raised before any compute starts."""


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite."""
