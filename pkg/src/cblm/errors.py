"""Exception types raised across the package."""


class CblmError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidSequence(CblmError, ValueError):
    pass


class FormatError(CblmError, ValueError):
    pass


class NothingToMask(CblmError, ValueError):
    pass


class InvalidProfile(CblmError, ValueError):
    pass


class EmptyAfterFilter(CblmError, ValueError):
    pass


class DegenerateConcept(CblmError, ValueError):
    pass


class LengthError(CblmError, ValueError):
    pass


class MissingConcepts(CblmError, ValueError):
    pass


class EmptyLoss(CblmError, ValueError):
    pass


class DivergenceError(CblmError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CorruptCheckpoint(CblmError, IOError):
    pass


class UnsupportedConcept(CblmError, ValueError):
    pass


class VariantError(CblmError, ValueError):
    pass


class ConfigError(CblmError, ValueError):
    pass
