"""Exception hierarchy shared by every part of the toolkit."""


class MildNetError(Exception):
    """Base class; the CLI maps subclasses onto distinct exit codes."""

    exit_code = 1


class ConfigError(MildNetError, ValueError):
    """Invalid configuration or shape contract violation."""

    exit_code = 2


class DataError(MildNetError):
    """Unreadable, missing or inconsistent input data.

    ``report`` carries one human-readable line per offending item.
    """

    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = list(report or [])

    def __str__(self):
        base = super().__str__()
        if not self.report:
            return base
        return base + "\n" + "\n".join("  - " + line for line in self.report)


class NumericError(MildNetError, FloatingPointError):
    """NaN/Inf produced during a forward pass, a backward pass or an update."""

    exit_code = 4


class GraphError(MildNetError, RuntimeError):
    """Malformed autodiff graph (e.g. a cycle)."""

    exit_code = 4
