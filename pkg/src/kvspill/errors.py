"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's preconditions."""


class NumericError(RuntimeError):
    """An iterative numeric routine failed to produce a usable result."""


class StorageError(OSError):
    """An on-disk KV operation failed."""


class GroupNotFoundError(KeyError):
    """A requested group id has never been written."""


class ContractViolation(RuntimeError):
    """An internal usage contract was broken by the caller."""


class ConfigurationError(RuntimeError):
    """The configured runtime parameters cannot satisfy the request."""


class ArtifactMismatchError(RuntimeError):
    """A tuning artifact does not match the model it is being used with."""


class MalformedInputError(ValueError):
    """A log, config, or artifact file could not be parsed."""
