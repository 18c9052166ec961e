"""Exception hierarchy shared across the package."""


class FieldDevError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FieldDevError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class ConfigError(FieldDevError):
    """Bad run configuration: unknown key, missing section, unparsable value."""


class NumericalError(FieldDevError):
    """A numerical procedure failed: singular system, non-convergence, non-finite values."""


class LifecycleError(FieldDevError):
    """An operation was called in the wrong order (step after done, backward before forward)."""


class IntegrityError(FieldDevError):
    """A serialized artifact failed validation (bad magic, checksum or hash mismatch)."""


class BudgetError(FieldDevError):
    """An optimizer budget was misused."""


class ShapeError(InvalidArgumentError):
    """Tensor shape mismatch; message names the offending layer."""
