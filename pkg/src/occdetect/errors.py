"""Exception hierarchy shared across modules."""


class OccupancyError(Exception):
    """Base class for all package errors."""


# dataset
class MalformedRow(OccupancyError):
    def __init__(self, line: int, column: str, value: object):
        self.line = line
        self.column = column
        self.value = value
        super().__init__(f"line {line}: non-numeric value {value!r} in column {column!r}")


class DuplicateTimestamp(OccupancyError):
    pass


class MissingColumn(OccupancyError):
    pass


class EmptySeries(OccupancyError):
    pass


class BoundaryOutsideSeries(OccupancyError):
    pass


# features
class DegenerateFeature(OccupancyError):
    pass


class SeriesTooShort(OccupancyError):
    pass


class UnknownFeature(OccupancyError):
    pass


# models
class DimensionMismatch(OccupancyError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class SingleClassTraining(OccupancyError):
    pass


class NonFiniteLoss(OccupancyError):
    pass


class NoConvergence(OccupancyError):
    pass


# evaluation
class NoPositives(OccupancyError):
    pass


class EmptySet(OccupancyError):
    pass


# hyperparameter search
class IllConditionedKernel(OccupancyError):
    pass


class ObjectiveFailure(OccupancyError):
    def __init__(self, params: dict, cause: BaseException):
        self.params = params
        self.cause = cause
        super().__init__(f"objective failed at {params}: {cause!r}")


class UnsupportedModel(OccupancyError):
    pass
