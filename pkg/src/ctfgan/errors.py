"""Exception types shared across the package."""


class CTFGANError(Exception):
    """Base class for every error raised by ctfgan."""


class NumericDomainError(CTFGANError, ValueError):
    """Input contains NaN or Inf where finite values are required."""


class ContractError(CTFGANError, ValueError):
    """A shape, resolution or argument precondition was violated."""


class LabelDomainError(CTFGANError, IndexError):
    """A class label lies outside its label space."""


class DataError(CTFGANError):
    """A dataset is empty or otherwise unusable."""


class DataValidationError(DataError):
    """Itemized failures collected while validating a manifest."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


class CheckpointIntegrityError(CTFGANError):
    """Checkpoint bundle is missing, truncated or fails its checksum."""


class TrainingAborted(CTFGANError):
    """Raised when a loss goes non-finite; carries the offending record."""

    def __init__(self, message, record=None):
        self.record = record
        super().__init__(message)
