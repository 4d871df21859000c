class LayerfuseError(Exception):
    """Base class for every error raised by the toolkit.

    `exit_code` is what the command-line front end returns when the error escapes a command.
    """

    exit_code = 1


class InvalidInputError(LayerfuseError, ValueError):
    """Raised when an argument violates a documented precondition"""

    exit_code = 2


class InsufficientSamplesError(InvalidInputError):
    """Raised when an estimator needs more rows than it was given"""

    pass


class ContainerFormatError(LayerfuseError):
    """Raised when a checkpoint or dump file cannot be decoded"""

    exit_code = 2

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MissingTargetError(InvalidInputError):
    """Raised when grid-search alpha selection is requested without target covariances"""

    pass


class ExhaustedError(LayerfuseError):
    """Raised when fewer than two mergeable layers remain"""

    exit_code = 2


class TrainingDivergedError(LayerfuseError):
    """Raised when the training loss stops being finite"""

    exit_code = 3

    def __init__(self, step, loss):
        super().__init__(f"Training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class SingularMatrixError(LayerfuseError):
    """Raised when a matrix expected to be positive definite is not"""

    exit_code = 4

    def __init__(self, message, pivot=None):
        if pivot is not None:
            message = f"{message} (failing pivot {pivot})"
        super().__init__(message)
        self.pivot = pivot


class DegenerateDataError(LayerfuseError):
    """Raised when activations carry no geometry to embed (e.g. all rows identical)"""

    exit_code = 4


class DegenerateAffinityError(DegenerateDataError):
    """Raised when an affinity matrix has a non-positive row sum"""

    pass


class NumericalFailureError(LayerfuseError):
    """Raised when a numerical routine produces NaN or Inf"""

    exit_code = 4
