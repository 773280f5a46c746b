"""Exception hierarchy shared by all ecborrow modules."""


class EcborrowError(Exception):
    """Base class for all library errors."""


class DataError(EcborrowError):
    """Problems with dataset construction or ingestion."""


class MissingColumn(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"required column {column!r} not found in header")


class NonNumericCell(DataError):
    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} as a number")


class InvalidIndicator(DataError):
    def __init__(self, row: int, column: str, value: float):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: indicator must be 0 or 1, got {value!r}")


class EmptyFile(DataError):
    pass


class EmptySubset(DataError):
    pass


class DimensionMismatch(EcborrowError):
    pass


class EstimationError(EcborrowError):
    """Base class for failures while fitting models or solving stacks."""


class SingularDesign(EstimationError):
    pass


class Separation(EstimationError):
    pass


class NoVariation(EstimationError):
    pass


class MissingArm(EstimationError):
    pass


class InsufficientData(EstimationError):
    pass


class BlockSolveFailed(EstimationError):
    def __init__(self, block: str, cause: Exception):
        self.block = block
        self.cause = cause
        super().__init__(f"block {block!r} failed to solve: {cause}")


class ResidualCheckFailed(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


class NonFiniteDerivative(EstimationError):
    pass


class NoLambdaData(EcborrowError):
    pass


class MissingArmWarning(UserWarning):
    """A per-arm statistic was computed without any row in that arm."""

