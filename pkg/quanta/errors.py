# QuanTA - Errors Module
# Exception types raised by the library and mapped to exit codes by the CLI


class QuantaError(Exception):
    """Base class for all library errors"""


class ValidationError(QuantaError, ValueError):
    """Invalid input: wrong shapes, bad files, bad configuration"""


class DimensionMismatchError(ValidationError):
    """Vector length or tensor shape does not fit the axis shape"""


class PlanValidationError(ValidationError):
    """Gate axes or extents are inconsistent with the plan"""


class InvalidArgumentError(ValidationError):
    """Argument outside its allowed range"""


class ContractionError(ValidationError):
    """Contraction expression does not match its operands"""


class QtfFormatError(ValidationError):
    """Malformed QTF file"""


class ConfigError(ValidationError):
    """Malformed JSON configuration"""


class NumericalError(QuantaError, ArithmeticError):
    """Non-finite values appeared during a computation"""


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite

    Args:
        message (str): Diagnostic message
        report (TrainReport): Report covering the steps run before divergence
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
