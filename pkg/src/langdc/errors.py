"""Error families shared across modules; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    exit_code = 2


class DataError(ValueError):
    exit_code = 3


class ContractViolation(RuntimeError):
    """A stage touched a parameter its trainability contract marks frozen."""

    exit_code = 4
