"""Exception types shared across the package."""


class GcapsError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(GcapsError, ValueError):
    """Operands have incompatible shapes for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(GcapsError, ValueError):
    """An input lies outside an operation's mathematical domain."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class GraphError(GcapsError, RuntimeError):
    """Misuse of the computation graph (e.g. repeated backward)."""


class DataFormatError(GcapsError, ValueError):
    """A data file does not match its declared binary format."""


class CheckpointError(GcapsError, ValueError):
    """A checkpoint file is corrupt or inconsistent with the model."""


class ConfigError(GcapsError, ValueError):
    """A run configuration value is missing or invalid."""


class TrainingDivergedError(GcapsError, RuntimeError):
    """Training produced a non-finite loss."""
