"""Exception hierarchy shared by the library and the command-line tool."""


class GroupNetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GroupNetError, ValueError):
    """Invalid run or architecture configuration.

    ``fields`` maps each offending dotted field name to its diagnostic.
    """

    exit_code = 2

    def __init__(self, fields):
        if isinstance(fields, str):
            fields = {"<config>": fields}
        self.fields = dict(fields)
        msg = "; ".join(f"{k}: {v}" for k, v in self.fields.items())
        super().__init__(msg)


class DataError(GroupNetError):
    exit_code = 3


class ModelFormatError(GroupNetError):
    exit_code = 4


class NumericError(GroupNetError, FloatingPointError):
    exit_code = 5
