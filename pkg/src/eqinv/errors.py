"""Exception hierarchy shared by every eqinv module."""


class EqInvError(Exception):
    """Base class for all library errors."""


class ShapeError(EqInvError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(EqInvError, RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericError(EqInvError, ArithmeticError):
    """A computation produced NaN or Inf."""


class SpecError(EqInvError, ValueError):
    """A dataset specification is invalid."""


class ConfigError(EqInvError, ValueError):
    """A configuration value or key is invalid."""


class FormatError(EqInvError):
    """A binary or text file does not follow the expected layout."""


class DataError(EqInvError):
    """Dataset contents cannot support the requested operation."""


class EnvLabelAccessError(EqInvError):
    """Hidden environment labels were read inside a guarded region."""
