"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs (CLI exit code 2); everything
else derived from ``EventSaeError`` is a runtime failure (exit code 3).
"""


class EventSaeError(Exception):
    pass


class ValidationError(EventSaeError):
    pass


# rollout_store
class MissingFile(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NonFiniteActivation(ValidationError):
    pass


class UnknownLayer(ValidationError):
    pass


class FormatVersionMismatch(ValidationError):
    pass


class IoError(EventSaeError):
    pass


# sae
class InvalidBudget(ValidationError):
    pass


class DegenerateVariance(EventSaeError):
    pass


class DivergedLoss(EventSaeError):
    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history


# keyframes
class IndexOutOfRange(ValidationError):
    pass


# events
class AllZeroDescriptor(ValidationError):
    pass


class AnnotatorUnavailable(EventSaeError):
    pass


class MalformedAnnotation(EventSaeError):
    pass


# ranking
class EmptyClusterSet(ValidationError):
    pass


class InsufficientAliveFeatures(ValidationError):
    pass


# intervention / synthworld
class ZeroState(ValidationError):
    pass


class HookShapeMismatch(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class DegenerateClassSplit(ValidationError):
    pass
