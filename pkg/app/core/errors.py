from __future__ import annotations

from typing import Any, Dict, TypeVar


E = TypeVar("E", bound="SdidmlError")


class SdidmlError(ValueError):
    """Base class for every domain error raised by the analysis services.

    Subclassing ValueError keeps the router convention of the HTTP layer:
    domain problems map to 400, everything else to 500.
    """

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = dict(context)

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"


def annotate(err: E, **context: Any) -> E:
    """Attach extra context (fold index, step name, ...) to an error in place."""
    err.context.update(context)
    return err


class InvalidArgument(SdidmlError):
    pass


# panel-core
class MissingColumn(SdidmlError):
    pass


class ParseError(SdidmlError):
    pass


class DuplicateKey(SdidmlError):
    pass


class EmptyData(SdidmlError):
    pass


class RoleOverlap(SdidmlError):
    pass


class NonBinaryTreatment(SdidmlError):
    pass


class TreatmentReversal(SdidmlError):
    pass


class UnknownUnit(SdidmlError):
    pass


class TimingOutOfRange(SdidmlError):
    pass


class ZeroVariance(SdidmlError):
    pass


class NameCollision(SdidmlError):
    pass


class InconsistentGroup(SdidmlError):
    pass


class EmptySubgroup(SdidmlError):
    pass


# learners / crossfit
class SingularDesign(SdidmlError):
    pass


class InsufficientData(SdidmlError):
    pass


class ShapeMismatch(SdidmlError):
    pass


class TooFewUnits(SdidmlError):
    pass


class NoResidualTreatmentVariation(SdidmlError):
    pass


# estimators
class DegenerateClusters(SdidmlError):
    pass


class WeakDenominator(SdidmlError):
    pass


class MissingInstrument(SdidmlError):
    pass


class CollinearAfterDemeaning(SdidmlError):
    pass


class NonConvergence(SdidmlError):
    pass


# diagnostics
class UnknownVariable(SdidmlError):
    pass


class PerfectCollinearity(SdidmlError):
    pass


class NotPositiveSemiDefinite(SdidmlError):
    pass


class SingularCorrelation(SdidmlError):
    pass


# robustness / mechanisms
class NoPrePeriods(SdidmlError):
    pass


class NoControlUnits(SdidmlError):
    pass


class TooManyFailedReps(SdidmlError):
    pass


class ConstantModerator(SdidmlError):
    pass


class ConstantMediator(SdidmlError):
    pass


class GroupTooSmall(SdidmlError):
    pass


# simulator / cli
class ConfigInvalid(SdidmlError):
    pass


class ConfigError(SdidmlError):
    pass


class StepFailure(SdidmlError):
    pass


class ReportIoError(SdidmlError):
    pass
