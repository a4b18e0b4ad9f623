"""Exception types raised across the package."""


class FvattnError(Exception):
    """Base class for all package errors."""


class FormatError(FvattnError):
    """A file does not follow its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class UnsupportedFormat(FormatError):
    pass


class CorruptHeader(FormatError):
    pass


class ManifestError(FvattnError):
    pass


class DuplicateId(ManifestError):
    pass


class LabelOutOfRange(ManifestError):
    pass


class MissingPath(ManifestError):
    pass


class EmptyImage(FvattnError):
    pass


class ShapeMismatch(FvattnError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class IndivisibleImage(FvattnError, ValueError):
    pass


class BadConfig(FvattnError, ValueError):
    pass


class PlanMismatch(ShapeMismatch):
    pass


class SizeMismatch(ShapeMismatch):
    pass


class TooFewSamples(FvattnError, ValueError):
    pass


class DegenerateData(FvattnError, ValueError):
    pass


class EmptyFeatureSet(FvattnError, ValueError):
    pass


class NotSingleComponent(FvattnError, ValueError):
    pass


class LabelMismatch(FvattnError, ValueError):
    pass


class EmptySplit(FvattnError, ValueError):
    pass


class SingleClass(FvattnError, ValueError):
    """AUC is undefined when only one class is present."""


class InvalidSpec(FvattnError, ValueError):
    pass


class StageError(FvattnError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
