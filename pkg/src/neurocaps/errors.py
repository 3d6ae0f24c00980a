"""Exception hierarchy shared by every module."""


class NeurocapsError(Exception):
    pass


class DimensionError(NeurocapsError, ValueError):
    """Operand shapes do not line up."""


class ContractError(NeurocapsError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(NeurocapsError, ArithmeticError):
    """NaN/inf showed up where a finite value is required."""


class CompileError(NeurocapsError):
    """A model cannot be lowered to a spiking network."""


class DegenerateScaleError(CompileError):
    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"layer {layer}: all calibration activations are zero")


class FormatError(NeurocapsError):
    """Base class for on-disk format failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
