"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ValidationError family -> 1,
NumericalError family -> 2.
"""


class VnactError(Exception):
    """Base class for all package errors."""


class ValidationError(VnactError):
    """Bad user input: malformed config, schema violation, out-of-range id."""


class ShapeError(ValidationError):
    """Tensor extents inconsistent with the requested operation."""


class FormatError(ValidationError):
    """Malformed serialized artifact (TNSF file, score JSON, manifest)."""


class NumericalError(VnactError):
    """A computation produced or depends on non-finite values."""


class NonFiniteError(NumericalError):
    """An operation produced NaN or Inf."""


class TapeError(VnactError):
    """Invalid use of a differentiation tape (re-traversal, foreign node)."""


class DeterminismError(NumericalError):
    """A forward pass expected to be deterministic returned differing values."""
