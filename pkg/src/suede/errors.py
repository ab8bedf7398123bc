"""Exception hierarchy.

Each class carries a stable ``code`` used as the CLI exit status and in the
machine-readable error line.
"""


class SuedeError(Exception):
    code = 1


class DimensionError(SuedeError, ValueError):
    code = 2


class DomainError(SuedeError, ValueError):
    code = 3


class ContractError(SuedeError, ValueError):
    code = 4


class ConfigError(SuedeError, ValueError):
    code = 5


class CheckpointError(SuedeError):
    code = 10


class CheckpointVersionError(CheckpointError):
    code = 11


class CheckpointTruncatedError(CheckpointError):
    code = 12


class CheckpointShapeError(CheckpointError):
    code = 13


class TrainingDivergedError(SuedeError):
    """Raised when the training loss becomes non-finite."""

    code = 20

    def __init__(self, message, *, epoch, batch, batch_seed):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.batch_seed = batch_seed
