"""Exception types shared across the package."""


class PanoosError(Exception):
    """Base class for all package errors."""


class DimensionError(PanoosError, ValueError):
    pass


class NumericDomainError(PanoosError, ArithmeticError):
    pass


class ContractError(PanoosError, ValueError):
    pass


class FormatError(PanoosError, ValueError):
    """Malformed raster or checkpoint file.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EvaluationError(PanoosError, ValueError):
    pass


class ConfigError(PanoosError, ValueError):
    pass
