class MapfError(Exception):
    """Base class for all errors raised by this package."""


class BankError(MapfError, ValueError):
    pass


class EmptyBank(BankError):
    pass


class NonNormalizedPrior(BankError):
    pass


class DimensionMismatch(BankError):
    pass


class ScheduleError(MapfError, ValueError):
    pass


class EmptyFilter(MapfError):
    pass


class AllWeightsZero(MapfError, FloatingPointError):
    pass


class InfeasibleFloor(MapfError, ValueError):
    pass


class ConfigError(MapfError, ValueError):
    pass


class UnsupportedModel(MapfError, TypeError):
    pass


class ParseError(MapfError, ValueError):
    def __init__(self, msg, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + msg)
        self.path = path
        self.line = line


class InvariantViolation(MapfError, ValueError):
    pass
