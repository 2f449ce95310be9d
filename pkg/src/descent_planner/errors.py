"""Exception types shared across the package."""


class DescentPlannerError(Exception):
    """Base class for all errors raised by this package."""


class IngestError(DescentPlannerError):
    """Raised when a dataset file cannot be turned into a Dataset."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class TransformError(DescentPlannerError):
    """Raised when a raw record cannot be parsed into a data unit."""

    def __init__(self, message, partition_id=None, offset=None, column=None):
        super().__init__(message)
        self.partition_id = partition_id
        self.offset = offset
        self.column = column


class EmptySampleError(DescentPlannerError):
    """Raised when a sampling pass produced no data units."""


class DivergenceError(DescentPlannerError):
    """Raised when an update would produce non-finite weights."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class PlanError(DescentPlannerError):
    """Raised for invalid plan combinations or missing plan inputs."""


class LineSearchStalledError(DescentPlannerError):
    """Raised when backtracking shrinks more than the allowed number of times."""


class EstimationUnavailableError(DescentPlannerError):
    """Raised when speculation completed zero iterations within its budget."""


class ConstraintViolation(DescentPlannerError):
    """Raised when no plan satisfies a user constraint; names the constraint."""

    def __init__(self, constraint, message):
        super().__init__(message)
        self.constraint = constraint
