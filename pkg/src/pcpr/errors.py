"""Exception types raised across the package."""


class PCPRError(Exception):
    """Base class for all package errors."""


class DegenerateCloud(PCPRError, ValueError):
    pass


class InvalidSpec(PCPRError, ValueError):
    pass


class FormatError(PCPRError):
    """A file on disk does not match its declared binary or text layout."""

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {message}")


class MissingIndexEntry(PCPRError, FileNotFoundError):
    pass


class ConfigMismatch(PCPRError, ValueError):
    pass


class NonFiniteActivation(PCPRError, FloatingPointError):
    pass


class NonFiniteGradient(PCPRError, FloatingPointError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class StaleCache(PCPRError, RuntimeError):
    pass


class DegenerateAngle(PCPRError, ValueError):
    pass


class EmptyTupleSet(PCPRError, ValueError):
    pass


class NoPositivePairs(PCPRError, ValueError):
    pass


class InsufficientEntries(PCPRError, ValueError):
    pass


class NoUsableAnchors(PCPRError, ValueError):
    pass


class InsufficientDomains(PCPRError, ValueError):
    pass


class EmptyDatabase(PCPRError, ValueError):
    pass


class UndefinedForSingleStep(PCPRError, ValueError):
    pass


class ProtocolViolation(UserWarning):
    """Warned when a zero-shot holdout overlaps a training domain."""
