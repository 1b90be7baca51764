"""Exception hierarchy shared across the package."""


class RegaVaeError(Exception):
    """Base class for all package errors."""


class DimensionError(RegaVaeError):
    """Tensor/vector shapes are incompatible for the requested operation."""


class ContractError(RegaVaeError):
    """A caller violated an API contract (wrong arity, reused tape, ...)."""


class ConfigError(RegaVaeError):
    """Invalid configuration value."""


class InputError(RegaVaeError):
    """Malformed or empty user input (corpus files, datasets, CLI args)."""


class DegenerateInputError(RegaVaeError):
    """Numerically degenerate input, e.g. a zero-norm vector for cosine."""


class NumericOverflowError(RegaVaeError):
    """An operation produced NaN or Inf."""


class RetrievalError(RegaVaeError):
    """Retrieval database misuse (empty database, missing snapshot)."""


class DivergenceError(RegaVaeError):
    """Training loss became non-finite."""
