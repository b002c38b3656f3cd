"""Exception types shared across the package.

The CLI maps these onto process exit codes, so each one is a category of
failure rather than a specific condition.
"""


class RegAttnError(Exception):
    exit_code = 1


class ConfigError(RegAttnError, ValueError):
    """Bad configuration: schema violation, negative weights, mismatched resume."""

    exit_code = 2


class InputError(RegAttnError, ValueError):
    """Array/image arguments with the wrong shape or range."""

    exit_code = 2


class InitializationError(RegAttnError, RuntimeError):
    """Pretrained weights missing or failing their checksum."""

    exit_code = 2


class DataError(RegAttnError, RuntimeError):
    exit_code = 3


class NumericalError(RegAttnError, FloatingPointError):
    """A loss went non-finite. ``dump_path`` points at the state dump, if any."""

    exit_code = 4

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
