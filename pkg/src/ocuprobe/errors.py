"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class OcuprobeError(Exception):
    """Base class for all pipeline errors."""


class ParseError(OcuprobeError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvariantViolation(ParseError):
    """A value parsed or constructed fine but breaks a domain invariant."""


class MissingFile(OcuprobeError):
    pass


class EmptySession(OcuprobeError):
    pass


class ConfigError(OcuprobeError):
    pass


class PolicyError(ConfigError):
    pass


class UnknownDose(OcuprobeError):
    pass


class InsufficientData(OcuprobeError):
    pass


class TooFewCheckups(OcuprobeError):
    pass


class TooFewPoints(OcuprobeError):
    pass


class ConvergenceFailure(OcuprobeError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (KKT residual {residual:.3e})")


class DegenerateLabels(OcuprobeError):
    pass


class EmptyInput(OcuprobeError):
    pass


class KeyMismatch(OcuprobeError):
    pass


class NoDecidableSubjects(OcuprobeError):
    pass


class InsufficientCheckups(OcuprobeError):
    pass


class MissingBaseline(OcuprobeError):
    pass


class ModelFormatError(OcuprobeError):
    pass
