class PsmError(Exception):
    """Base class for library errors."""


class ParseError(PsmError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(message)
        self.line = line


class ValidationError(PsmError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(message)
        self.line = line


class EmptyLogError(PsmError):
    pass


class DomainError(PsmError, ValueError):
    """An argument lies outside the operation's domain."""


class UndefinedError(PsmError):
    """A probability or metric has an empty denominator set."""


class ConfigError(PsmError):
    pass
