"""Exception types shared across the package."""


class OpusimError(Exception):
    """Base class for package errors."""


class InputError(OpusimError, ValueError):
    """Invalid argument: shape mismatch, out-of-range label, bad config value."""


class BlockedPathError(OpusimError, RuntimeError):
    """Exact backpropagation was requested through a non-differentiable
    defense layer whose matrix is not readable."""


class ContractError(OpusimError, RuntimeError):
    """An operation was called on a model that does not satisfy its
    structural precondition (e.g. hybrid backward without a defense slot)."""


class ValidationError(OpusimError, RuntimeError):
    """A run-level precondition failed before any work was done
    (e.g. ablation variants outside the accuracy band, bad manifest)."""
