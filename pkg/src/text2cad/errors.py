"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class Text2CadError(Exception):
    """Base class; ``kind`` is the machine-readable name used by the CLI."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class DegenerateInput(Text2CadError):
    pass


class OutOfRange(Text2CadError):
    pass


class TooLong(Text2CadError):
    pass


class InvalidModel(Text2CadError):
    def __init__(self, report):
        self.report = report
        super().__init__(", ".join(r.value for r in report.reasons) or "invalid model")


class InvalidityError(Text2CadError):
    """A token stream that does not decode into a valid model.

    ``report`` is the :class:`~text2cad.cad.ValidityReport` describing why.
    """

    def __init__(self, report, detail: str = ""):
        self.report = report
        self.detail = detail
        reasons = ", ".join(r.value for r in report.reasons)
        super().__init__(f"{reasons}: {detail}" if detail else reasons)


class DegenerateLoop(Text2CadError):
    pass


class SelfIntersectingProfile(Text2CadError):
    pass


class EmptySolid(Text2CadError):
    pass


class SchemaError(Text2CadError):
    def __init__(self, path: str, message: str = "missing required field"):
        self.path = path
        super().__init__(f"{message} at {path}")


class UnsupportedCurve(Text2CadError):
    pass


class TemplateMismatch(Text2CadError):
    pass


class GeneratorError(Text2CadError):
    pass


class EmptyCorpus(Text2CadError):
    pass


class VocabMismatch(Text2CadError):
    pass


class TokenOutOfRange(Text2CadError):
    pass


class ShapeMismatch(Text2CadError):
    pass


class DivergedLoss(Text2CadError):
    pass


class CheckpointError(Text2CadError):
    pass


class NonFiniteCost(Text2CadError):
    pass


class EmptyCloud(Text2CadError):
    pass


class InvalidInput(Text2CadError):
    pass


class ManifestMismatch(Text2CadError):
    pass


class ConfigError(Text2CadError):
    pass
