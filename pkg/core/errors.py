# -*- coding: utf-8 -*-
"""
Exception hierarchy shared by all cores.

Every class also derives from the builtin exception a caller would expect,
so plain ``except ValueError`` handling keeps working.
"""


class Tt2vfinError(Exception):
    """Base class of every error raised by the toolkit"""


class UsageError(Tt2vfinError, ValueError):
    """Precondition of an operation violated by the caller"""


class DimensionError(UsageError):
    """Array extents do not fit the operation"""


class NumericError(Tt2vfinError, ArithmeticError):
    """Input or result outside the numerically valid domain"""


class AggregationError(NumericError):
    """GMNN row without a single valid value

    :param date: Date (or row index) of the offending row
    """

    def __init__(self, date, message: str = None) -> None:
        self.date = date
        super().__init__(message or f"All values NaN at {date}, nothing to aggregate")


class IngestionError(Tt2vfinError, ValueError):
    """Price file could not be parsed

    :param row: 1-based data row number (header excluded), None for file level errors
    :param field: Column name involved
    """

    def __init__(self, message: str, row: int = None, field: str = None) -> None:
        self.row = row
        self.field = field
        where = []
        if row is not None:
            where.append(f"row {row}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class TrainingError(Tt2vfinError, RuntimeError):
    """Training could not continue

    :param epoch: Epoch in which the failure happened
    :param parameter: Name of the offending parameter array
    """

    def __init__(self, message: str, epoch: int = None, parameter: str = None) -> None:
        self.epoch = epoch
        self.parameter = parameter
        super().__init__(message)


class ConfigError(Tt2vfinError, ValueError):
    """Run configuration is invalid or incompatible"""


class CheckpointError(Tt2vfinError, OSError):
    """Checkpoint file is truncated or corrupt"""
