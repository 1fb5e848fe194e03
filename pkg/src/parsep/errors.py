"""Exception types shared across the package."""


class ParsepError(Exception):
    """Base class for all package errors."""


class ShapeError(ParsepError, ValueError):
    pass


class InputTooShort(ParsepError, ValueError):
    pass


class EmptyCorpus(ParsepError, ValueError):
    pass


class ConfigError(ParsepError, ValueError):
    pass


class InvalidConfig(ConfigError):
    """A hyperparameter point that cannot be turned into a network."""


class RangeError(ParsepError, ValueError):
    pass


class DivergedError(ParsepError, ArithmeticError):
    pass


class NumericalError(ParsepError, ArithmeticError):
    pass


class TooFewPoints(ParsepError, ValueError):
    pass


class UndefinedReference(ParsepError, ValueError):
    pass


class FeasibilityError(ParsepError, RuntimeError):
    pass


class MissingArtifact(ParsepError, FileNotFoundError):
    pass
