class ConfigError(ValueError):
    """Invalid hyperparameter, size or configuration value."""


class UsageError(ConfigError):
    """Unknown objective tag or malformed command-line input."""


class ShapeError(ValueError):
    """Dimension mismatch between tensors or against a configured width."""


class DomainError(ValueError):
    """Input outside the domain of an operation, e.g. an empty reduction axis."""


class DegenerateInputError(ValueError):
    """Vector norm below the normalization floor."""


class ContractError(ValueError):
    """A caller broke the calling contract of a helper."""


class BatchContractError(KeyError):
    """An embedding batch lacks a role the objective needs."""


class UnknownGoalError(KeyError):
    """Goal id without a row in the text encoder table."""


class DataError(ValueError):
    """Archive or dataset content does not support the requested operation."""


class VersionError(ValueError):
    """File format version or stored dimensions do not match."""


class NumericalError(FloatingPointError):
    """Non-finite value produced by an operation, a gradient or a loss."""
