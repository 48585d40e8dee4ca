"""Exception hierarchy shared across the package.

Three broad families map onto the CLI exit-code contract:
``ConfigError`` -> 2, ``DataError`` -> 3, ``NumericError`` -> 4. Anything
else that escapes is a plain bug and exits 1.
"""

from __future__ import annotations


class FsdgError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(FsdgError):
    """Invalid configuration, flags, or API usage."""

    exit_code = 2


class DataError(FsdgError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericError(FsdgError):
    """Numerical failure (non-finite values, degenerate statistics)."""

    exit_code = 4


# --- hierarchy ---------------------------------------------------------


class MissingParent(DataError):
    pass


class CycleOrLevelMismatch(DataError):
    pass


class DuplicateClassId(DataError):
    pass


class HierarchyFormatError(DataError):
    pass


class OutOfRangeClass(DataError):
    pass


class InvalidLevel(ConfigError):
    pass


class NotADistribution(DataError):
    pass


class SingleLevelHierarchy(ConfigError):
    pass


# --- feature space and similarity --------------------------------------


class DimensionMismatch(ConfigError):
    pass


class EmptySegment(ConfigError):
    pass


class ZeroVector(NumericError):
    pass


class DegenerateBandwidth(NumericError):
    pass


# --- losses and objectives ----------------------------------------------


class BatchMismatch(DataError):
    pass


class EmptyGroup(DataError):
    pass


class TooFewClasses(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class MissingComponent(ConfigError):
    pass


# --- network -------------------------------------------------------------


class ShapeMismatch(DataError):
    pass


class UnavailableBranch(ConfigError):
    pass


# --- training and evaluation ---------------------------------------------


class NonFiniteLoss(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class EmptyDataset(DataError):
    pass


class ClassCountMismatch(DataError):
    pass


class EmptySearchSpace(ConfigError):
    pass


# --- explainability --------------------------------------------------------


class UntrainedModel(ConfigError):
    pass


class TooFewPairs(DataError):
    pass


# --- synthetic data ---------------------------------------------------------


class InconsistentBranching(ConfigError):
    pass


# --- manifests ---------------------------------------------------------------


class ManifestError(DataError):
    pass
