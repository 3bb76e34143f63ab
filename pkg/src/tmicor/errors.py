"""Exception hierarchy.

Everything raised on purpose by this package derives from ``TmicorError``.
``ValidationError`` covers bad user input (data files, labels, configs);
the CLI maps it to exit code 2, and any other failure to exit code 1.
"""


class TmicorError(Exception):
    """Base class for all errors raised by tmicor."""


class ValidationError(TmicorError):
    """Invalid user-supplied data or configuration."""


class ParseError(ValidationError):
    """A cell or line could not be parsed (includes NaN/Inf values)."""


class ShapeError(ValidationError):
    """Ragged rows or dimensions that make the analysis impossible."""


class LabelError(ValidationError):
    """Class labels are not two groups of at least four samples each."""


class DegenerateFeature(ValidationError):
    """One or more features are constant within a class."""

    def __init__(self, features, message=None):
        self.features = tuple(features)
        if message is None:
            message = "zero within-class variance for feature(s): " + ", ".join(
                str(f) for f in self.features
            )
        super().__init__(message)


class RankDeficientNuisance(ValidationError):
    """Per-class nuisance block (with intercept) is not full column rank."""


class InsufficientDF(ValidationError):
    """Too many nuisance variables for the smaller class."""


class SaturatedCorrelation(ValidationError):
    """A correlation reached +/-1 and cannot be arctanh-transformed."""


class SingularInput(ValidationError):
    """Input outside the domain of a closed-form expression."""


class EmptyPool(ValidationError):
    """The permutation null pool contains no values."""


class DegeneratePermutation(TmicorError):
    """Redrawing permutations kept producing constant columns."""


class DomainError(ValidationError):
    """A numeric argument is outside its documented range."""


class NotPositiveDefinite(ValidationError):
    """A requested covariance matrix has a non-positive eigenvalue."""


class CholeskyFailure(TmicorError):
    """Cholesky factorization failed on a supposedly PD matrix."""


class UnknownFeature(ValidationError):
    """A referenced feature name does not exist in the dataset."""


class OverlappingSets(ValidationError):
    """Cross-set definition assigns a feature to both sets."""
