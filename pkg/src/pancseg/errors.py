"""Exception hierarchy shared by all modules.

``DataError`` subclasses map to CLI exit code 2; anything else escaping the
CLI is treated as an internal error.
"""


class SegError(Exception):
    """Base class for all package errors."""


class DataError(SegError):
    """Input data is malformed or violates a precondition."""


class FormatError(DataError):
    """A file does not conform to its documented format."""


class HeaderError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class TypeMismatchError(FormatError):
    pass


class IntensityRangeError(DataError):
    pass


class EmptyBodyError(DataError):
    pass


class EmptySliceError(DataError):
    pass


class SliceTooSmallError(DataError):
    pass


class EmptyBoundaryError(DataError):
    pass


class DegenerateBoxError(DataError):
    pass


class SampleError(DataError):
    """Empty or out-of-range KDE samples."""


class WindowError(DataError):
    """A descriptor or patch window falls outside the slice."""


class SingleClassError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class ModelFormatError(FormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class EmptySuperpixelError(DataError):
    pass


class DegenerateCascadeError(DataError):
    pass


class MissingFeaturesError(DataError):
    pass


class EmptyGroundTruthError(DataError):
    pass


class MissingArtifactError(DataError):
    pass


class StageError(SegError):
    """Wraps a failure inside cross-validation with fold/case context."""

    def __init__(self, message, fold=None, case=None):
        super().__init__(message)
        self.fold = fold
        self.case = case
