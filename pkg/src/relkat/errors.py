"""Exception types shared across the package."""


class RelkatError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(RelkatError):
    """Operands do not conform for the requested operation."""

    def __init__(self, op: str, *shapes) -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class DegenerateVectorError(RelkatError):
    """A vector with zero norm reached an operation that requires direction."""

    def __init__(self, op: str) -> None:
        self.op = op
        super().__init__(f"{op}: degenerate vector (zero norm)")


class GradientError(RelkatError):
    """Misuse of the reverse-mode machinery (non-scalar loss, double backward,
    missing gradient on a trainable parameter)."""


class NonFiniteError(RelkatError):
    """A NaN or Inf appeared where a finite value is required.

    ``context`` identifies the offending location (parameter index, batch, ...).
    """

    def __init__(self, message: str, context=None) -> None:
        self.context = context
        super().__init__(message if context is None else f"{message} [{context}]")


class DataError(RelkatError):
    """Invalid dataset request or generator configuration."""


class TaskRegistryError(RelkatError):
    """Unknown task, duplicate task, capacity, or ownership violation."""


class CheckpointError(RelkatError):
    """Malformed, truncated, or incompatible checkpoint file."""


class SiteFailure(RelkatError):
    """A federated site failed mid-round; no partial aggregation happened."""

    def __init__(self, site_id: str, cause: Exception) -> None:
        self.site_id = site_id
        self.cause = cause
        super().__init__(f"site {site_id!r} failed: {cause}")


class ConfigError(RelkatError):
    """Bad configuration file or key set.  CLI maps this to exit code 2."""

    def __init__(self, message: str, key: str | None = None) -> None:
        self.key = key
        super().__init__(message)
