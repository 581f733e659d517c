"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the CLI exit code it maps to: 2 for bad input or
configuration, 3 for numerical failures.
"""


class GPIError(Exception):
    exit_code = 3
    stage = "gpi"


class ValidationError(GPIError, ValueError):
    exit_code = 2
    stage = "validation"


class DimensionError(ValidationError):
    stage = "shape"


class ConfigError(ValidationError):
    stage = "config"


class FormatError(ValidationError):
    stage = "io"


class TruncatedFileError(FormatError, OSError):
    pass


class PartitionError(ValidationError):
    stage = "partition"


class DegenerateTreatmentError(ValidationError):
    stage = "treatment"


class DegenerateInputError(ValidationError):
    stage = "diagnostics"


class EstimandUndefinedError(ValidationError):
    stage = "estimation"


class CoverageError(ValidationError):
    stage = "structural"


class ProvenanceError(ValidationError):
    stage = "simulate"


class TrainingDivergedError(GPIError):
    stage = "training"

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
