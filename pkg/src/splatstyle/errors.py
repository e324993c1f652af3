"""Exception types shared across the package."""


class ParseError(ValueError):
    """Malformed file content. Carries the byte offset where parsing stopped."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(ValueError):
    """Well-formed input whose values violate an invariant."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes/schedules."""


class ContractError(RuntimeError):
    """A precondition of an operation was not met (e.g. missing channel)."""
