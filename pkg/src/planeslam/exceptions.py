"""Exception types raised by the planeslam modules."""


class PlaneSlamError(Exception):
    """Base class for all library errors."""


class DegeneratePlane(PlaneSlamError):
    pass


class BehindCamera(PlaneSlamError):
    pass


class DegenerateCloud(PlaneSlamError):
    pass


class NoLinesFound(PlaneSlamError):
    pass


class ParallelLines(PlaneSlamError):
    pass


class VertexExtractionFailed(PlaneSlamError):
    """Raised when plane vertices cannot be validated.

    ``condition`` is 1 (foot gap), 2 (distance to plane), 3 (outside the
    detection box) or 0 when no usable pair of parallel line pairs exists.
    """

    def __init__(self, condition, message):
        super().__init__(message)
        self.condition = condition


class InsufficientSamples(PlaneSlamError):
    pass


class NotVisible(PlaneSlamError):
    pass


class FactorNotEvaluable(PlaneSlamError):
    pass


class NoFactors(PlaneSlamError):
    pass


class InvalidSpec(PlaneSlamError):
    pass


class NothingVisible(PlaneSlamError):
    pass


class NoMatches(PlaneSlamError):
    pass


class ParseError(PlaneSlamError):
    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)
        self.line = line
        self.column = column


class ConfigError(PlaneSlamError):
    pass
