"""Exception types raised across the toolkit."""


class CldistillError(Exception):
    """Base class for all toolkit errors."""


class EmptyDataset(CldistillError):
    pass


class IndivisibleSplit(CldistillError):
    pass


class InsufficientClasses(CldistillError):
    pass


class ShapeMismatch(CldistillError):
    pass


class DuplicateClass(CldistillError):
    pass


class LabelOutOfRange(CldistillError):
    pass


class NoPositive(CldistillError):
    pass


class NoNegative(CldistillError):
    pass


class MissingTeacher(CldistillError):
    pass


class NonFiniteLoss(CldistillError):
    def __init__(self, message, batch_dump=None):
        super().__init__(message)
        self.batch_dump = batch_dump


class EmptyGallery(CldistillError):
    pass


class ZeroVector(CldistillError):
    pass


class KTooLarge(CldistillError):
    pass


class DegenerateSplit(CldistillError):
    pass


class InconsistentCheckpoints(CldistillError):
    pass


class ConfigError(CldistillError):
    """Invalid experiment configuration; message carries the field path."""
