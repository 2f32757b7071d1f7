"""Exception types shared across the package."""


class UnimatchError(Exception):
    """Base class for all package errors."""


class ConfigError(UnimatchError):
    """Invalid or inconsistent configuration values."""


class SchemaError(UnimatchError):
    """Record does not match the unified feature schema."""


class DimensionError(UnimatchError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(UnimatchError):
    """An operation was called outside its documented contract."""


class NumericsError(UnimatchError):
    """Non-finite value produced or consumed by a tensor operation."""


class DivergenceError(UnimatchError):
    """Training produced a non-finite loss.

    Carries the path of the last finite checkpoint, if one was written.
    """

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
