"""Exception hierarchy shared across the pipeline."""


class DentalDetError(Exception):
    """Base class for every error raised by this package."""


class MalformedFile(DentalDetError):
    pass


class UnknownCategory(DentalDetError):
    pass


class TierMismatch(DentalDetError):
    pass


class ConflictingFDI(DentalDetError):
    pass


class DegenerateTransform(DentalDetError):
    pass


class ShapeMismatch(DentalDetError):
    pass


class InvalidTier(DentalDetError):
    pass


class EmptyDataset(DentalDetError):
    pass


class NonFiniteLoss(DentalDetError):
    """Raised when a loss component stops being finite during training."""

    def __init__(self, term: str, breakdown: dict):
        self.term = term
        self.breakdown = breakdown
        super().__init__(f"non-finite loss term {term!r}: {breakdown}")


class NonFiniteCost(DentalDetError):
    pass


class MissingAssignedLabels(DentalDetError):
    pass


class ConfigError(DentalDetError):
    pass
