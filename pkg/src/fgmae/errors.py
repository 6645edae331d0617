"""Typed errors raised across the package."""


class FgmaeError(Exception):
    pass


class InvalidShape(FgmaeError, ValueError):
    pass


class InvalidParam(FgmaeError, ValueError):
    pass


class InvalidCube(FgmaeError, ValueError):
    pass


class ValidationError(FgmaeError, ValueError):
    pass


class MissingAnnotation(FgmaeError):
    pass


class GenerationFailure(FgmaeError, RuntimeError):
    pass


class NonFiniteGradient(FgmaeError, FloatingPointError):
    pass


class IncompatibleCheckpoint(FgmaeError):
    pass


class CorruptFile(FgmaeError):
    pass


class DegeneratePose(FgmaeError, ValueError):
    pass
