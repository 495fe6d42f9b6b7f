"""Exception types; each maps to a CLI exit code."""


class SGDiffError(Exception):
    exit_code = 1


class ConfigError(SGDiffError):
    exit_code = 2


class DependencyError(SGDiffError):
    """A stage was started before the checkpoints it needs exist and verify."""

    exit_code = 3


class DataValidationError(SGDiffError, ValueError):
    exit_code = 4


class NumericError(SGDiffError, FloatingPointError):
    exit_code = 5
