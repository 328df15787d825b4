"""Exception types shared across the toolkit.

Most subclasses also inherit from ValueError so call sites can catch either
the toolkit-specific type or the builtin, whichever reads better.
"""


class AesdistillError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(AesdistillError, ValueError):
    """A value object violates its invariants (bad distribution, bad attention rows)."""


class ShapeMismatchError(AesdistillError, ValueError):
    """Two inputs that must agree in length/shape/binning do not."""


class DegenerateInputError(AesdistillError, ValueError):
    """An input is degenerate for the requested statistic (e.g. zero variance)."""


class CompositionError(AesdistillError, ValueError):
    """Manifests or batch plans cannot be combined as requested."""


class ConfigError(AesdistillError):
    """Invalid or inconsistent run configuration."""


class CacheIntegrityError(AesdistillError):
    """A feature cache does not match the encoder/preprocessing it is used with."""


class DivergenceError(AesdistillError):
    """Training hit a non-finite loss. Carries diagnostics for the failing step."""

    def __init__(self, message: str, *, step: int | None = None,
                 lr: float | None = None, batch_ids: tuple[str, ...] = ()):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.batch_ids = tuple(batch_ids)


class UnsupportedCapabilityError(AesdistillError):
    """The model does not support the requested operation (e.g. attention capture)."""
