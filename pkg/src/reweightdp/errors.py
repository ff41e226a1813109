"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not conform."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DomainError(ValueError):
    """A numeric argument lies outside its admissible range."""


class CapabilityError(TypeError):
    """A model contains a layer that cannot provide per-example gradients."""


class CalibrationError(RuntimeError):
    """Noise calibration could not reach the requested privacy target."""


class FormatError(ValueError):
    """A binary input file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
