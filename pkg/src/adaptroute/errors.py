"""Exception types shared across the package."""


class AdaptRouteError(Exception):
    pass


class ConfigError(AdaptRouteError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(AdaptRouteError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError, ValueError):
    pass


class DomainError(AdaptRouteError, ValueError):
    pass


class ParseError(AdaptRouteError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RunError(AdaptRouteError, RuntimeError):
    def __init__(self, message: str, task: str | None = None):
        self.task = task
        if task is not None:
            message = f"task {task}: {message}"
        super().__init__(message)
