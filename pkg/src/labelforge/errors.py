"""Exception families. Each family maps onto one CLI exit code."""


class LabelForgeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(LabelForgeError):
    """Bad command line: unknown flag, missing argument, unknown subcommand."""

    exit_code = 2


class ConfigError(LabelForgeError):
    """Invalid configuration: schema violation, unknown key, bad value."""

    exit_code = 3


class DataError(LabelForgeError):
    """Invalid or inconsistent data: bad shapes, bad files, broken invariants."""

    exit_code = 4


class DivergenceError(LabelForgeError):
    """Numerical failure: training loss became non-finite."""

    exit_code = 5
