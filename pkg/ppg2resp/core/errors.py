"""Error types shared by all services.

Each family maps to one CLI exit code (see ``exit_code_for``).
"""
from typing import Optional, Sequence


class PipelineError(Exception):
    """Base class for every error raised by the package"""
    exit_code = 1


class InputValidationError(PipelineError):
    """Caller supplied inputs that violate a precondition"""
    exit_code = 2


class NumericalError(PipelineError):
    exit_code = 3


class StorageError(PipelineError):
    """Reading or writing an artifact on disk failed"""
    exit_code = 4


class IngestionError(InputValidationError):
    """A raw signal file could not be turned into a Recording"""

    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None):
        self.path = path
        self.row = row
        location = ""
        if path is not None:
            location = f"{path}"
            if row is not None:
                location += f", row {row}"
            location = f" [{location}]"
        super().__init__(f"{message}{location}")


class SignalError(InputValidationError):
    pass


class NoDominantFrequencyError(SignalError):
    def __init__(self, message: str = "no dominant frequency"):
        super().__init__(message)


class ScheduleError(InputValidationError):
    pass


class ShapeError(InputValidationError):
    pass


class NonFiniteLossError(NumericalError):
    """Training produced a NaN/Inf loss; carries enough context to replay the batch"""

    def __init__(self, epoch: int, batch_indices: Sequence[int], timesteps: Sequence[int]):
        self.epoch = epoch
        self.batch_indices = list(batch_indices)
        self.timesteps = list(timesteps)
        super().__init__(
            f"non-finite loss at epoch {epoch}; "
            f"batch indices {self.batch_indices}; t values {self.timesteps}"
        )


class CheckpointError(StorageError):
    pass


class StoreError(StorageError):
    pass


class OutputLockedError(StorageError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        return exc.exit_code
    return 1
