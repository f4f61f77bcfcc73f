class SteppedWedgeError(Exception):
    """Base class for all package errors."""


class DesignError(SteppedWedgeError, ValueError):
    pass


class ConfigError(SteppedWedgeError, ValueError):
    pass


class DataError(SteppedWedgeError, ValueError):
    pass


class NumericalError(SteppedWedgeError, ArithmeticError):
    pass


class IdentificationError(NumericalError):
    """The treatment-effect parameters are not identified by the centered design."""
