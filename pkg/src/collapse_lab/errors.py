"""Exception types shared across the package."""


class CollapseLabError(Exception):
    """Base class for all errors raised by collapse_lab."""


class ShapeError(CollapseLabError, ValueError):
    pass


class NumericError(CollapseLabError, ArithmeticError):
    pass


class FormatError(CollapseLabError, ValueError):
    """A file failed magic, version, checksum or layout validation."""


class ConfigError(CollapseLabError, ValueError):
    pass


class InputError(CollapseLabError, ValueError):
    pass


class PreconditionError(CollapseLabError, ValueError):
    pass
