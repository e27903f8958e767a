"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes do not conform for the requested primitive."""


class DomainError(ContractError):
    """A primitive was evaluated outside its mathematical domain."""


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(IOError):
    pass


class CorruptionError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class RoleError(CheckpointError):
    pass


class NoResponseError(RuntimeError):
    """The ensemble had no candidate to choose from."""
