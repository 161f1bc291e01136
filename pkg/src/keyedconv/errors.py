"""Structured errors with machine-readable codes.

Every error carries a stable ``code`` string so callers (and the CLI exit-code
mapping) can dispatch without parsing messages.
"""


class KeyedConvError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class ShapeError(KeyedConvError):
    """Tensor/grid dimensions are inconsistent with what an operation needs."""

    code = "shape"


class ParameterError(KeyedConvError):
    """A parameter value is out of its legal range (e.g. padding >= kernel)."""

    code = "parameter"


class FormatError(KeyedConvError):
    """A file does not follow its documented encoding (bad magic, version, field)."""

    code = "format"


class IntegrityError(KeyedConvError):
    """A file is well-formed but its payload violates an invariant."""

    code = "integrity"
