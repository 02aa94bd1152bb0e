"""Exception hierarchy; the CLI maps each class to an exit code."""


class FedLeakError(Exception):
    exit_code = 1


class ConfigError(FedLeakError, ValueError):
    """Inconsistent configuration, shapes or sizes."""

    exit_code = 2


class DomainError(ConfigError):
    """Argument outside the mathematical domain of a formula."""


class DataError(FedLeakError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class InvariantError(FedLeakError, RuntimeError):
    """An internal invariant was violated."""

    exit_code = 4
