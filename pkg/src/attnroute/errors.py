"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(ValueError):
    """Config file is malformed; message carries the offending line number."""


class ConvergenceError(RuntimeError):
    """A training run finished without meeting its stated probe targets."""
