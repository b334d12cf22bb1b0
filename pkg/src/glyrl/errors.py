"""Exception hierarchy shared across the pipeline.

Argument misuse raises plain ValueError; these classes cover data and
numerical failures that the CLI maps to distinct exit codes.
"""


class GlyrlError(Exception):
    """Base class for pipeline errors."""


class ConfigError(GlyrlError):
    """Bad or unknown configuration content (CLI exit code 1)."""


class DataError(GlyrlError):
    """Input data violates the expected schema or semantics (exit code 2)."""


class ParseError(DataError):
    """Malformed CSV row; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class IntegrityError(DataError):
    """Cross-row inconsistency within one patient's records."""

    def __init__(self, patient_id: str, message: str):
        super().__init__(f"patient {patient_id}: {message}")
        self.patient_id = patient_id


class ImputationError(DataError):
    """A covariate has no observed value anywhere in a series."""

    def __init__(self, patient_id: str, covariate: str):
        super().__init__(
            f"patient {patient_id}: covariate {covariate!r} has no observed values"
        )
        self.patient_id = patient_id
        self.covariate = covariate


class CalibrationError(DataError):
    """Too little data to fit the mortality-return curve."""


class ArtifactError(DataError):
    """Serialized artifact is corrupted or has an incompatible version."""


class NumericalError(GlyrlError):
    """Numerical failure during optimization (exit code 3)."""


class TrainingDivergedError(NumericalError):
    """Autoencoder training produced a non-finite loss."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(
            f"non-finite loss at epoch {epoch} (learning_rate={learning_rate})"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


class ConvergenceError(NumericalError):
    """An iterative solver exceeded its iteration cap."""
