"""Exception types shared across the package.

Configuration and data problems map to CLI exit code 2, everything else to 1.
"""


class CGLError(Exception):
    pass


class ConfigurationError(CGLError, ValueError):
    """Invalid hyperparameters, shapes or run settings."""


class DataError(CGLError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class UsageError(CGLError, RuntimeError):
    """An API was called in the wrong order or with the wrong kind of object."""


class InvariantError(CGLError, RuntimeError):
    pass


class NumericalError(CGLError, FloatingPointError):
    pass


class CheckpointError(CGLError):
    pass


class IntegrityError(CheckpointError):
    pass
