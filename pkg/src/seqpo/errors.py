"""Exception classes shared across the package."""


class InputError(ValueError):
    """Malformed call arguments (bad token ids, empty responses, shape mismatch)."""


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


class StateError(RuntimeError):
    """An object is missing data required by the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
