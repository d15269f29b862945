"""Exception hierarchy.

Every error raised on purpose by the package derives from ``TetraSplatError``
so the CLI can turn it into a nonzero exit status with a readable message.
"""


class TetraSplatError(Exception):
    """Base class for all package errors."""


class ShapeError(TetraSplatError, ValueError):
    pass


class DegenerateCovarianceError(TetraSplatError, ValueError):
    pass


class InsufficientPointsError(TetraSplatError, ValueError):
    pass


class DegenerateInputError(TetraSplatError, ValueError):
    pass


class InvalidWeightsError(TetraSplatError, ValueError):
    pass


class EmptyMeshError(TetraSplatError, ValueError):
    pass


class EmptyInputError(TetraSplatError, ValueError):
    pass


class RenderAbortError(TetraSplatError, FloatingPointError):
    def __init__(self, message, gaussian_index=None):
        super().__init__(message)
        self.gaussian_index = gaussian_index


class StaleStateError(TetraSplatError, RuntimeError):
    pass


class NonFiniteLossError(TetraSplatError, FloatingPointError):
    def __init__(self, message, checkpoint=None, iteration=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


class ConfigError(TetraSplatError, ValueError):
    pass


class StageDependencyError(TetraSplatError):
    def __init__(self, message, missing=None):
        super().__init__(message)
        self.missing = missing


# -- file formats ---------------------------------------------------------


class FormatError(TetraSplatError, ValueError):
    """Base for malformed-file errors."""


class ParseError(FormatError):
    def __init__(self, message, path=None, line_number=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line_number is not None:
                loc += f":{line_number}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line_number = line_number


class UnsupportedCameraModelError(FormatError):
    def __init__(self, model, path=None, line_number=None):
        super().__init__(f"unsupported camera model {model!r}")
        self.model = model
        self.path = path
        self.line_number = line_number


class SchemaError(FormatError):
    pass


class TruncatedError(FormatError):
    """Payload shorter than its header declares."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class IndexRangeError(FormatError):
    pass


class UnknownFlagsError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
