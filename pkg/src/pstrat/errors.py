"""Exception taxonomy shared across the package."""


class PstratError(Exception):
    """Base class for all package errors."""


# ---- strata algebra ----------------------------------------------------


class DegenerateMargin(PstratError):
    """A margin probability sits on or outside (0, 1) where forbidden."""


class ThetaOne(PstratError):
    """The quadratic-branch formula was requested at odds ratio exactly 1."""


class InvalidTheta(PstratError):
    """Odds ratio specification outside the admissible range."""


class DeltaUnderflow(PstratError):
    """The discriminant fell below the numeric guard in derivative code."""


# ---- learners / nuisances ----------------------------------------------


class RankDeficient(PstratError):
    """Design matrix is not full column rank on the fitted subset."""


class SeparationDetected(PstratError):
    """Logistic fit diverged (quasi-separation); ridge fallback also failed."""


class StackedFitFailed(PstratError):
    """Every member of a stacked learner failed to fit."""


class SparseCell(PstratError):
    """A (Z, D) cell is too small for the requested fold plan."""


class MissingOutcome(PstratError):
    """The outcome is undefined (NaN) on rows an estimator must read."""


# ---- estimators ---------------------------------------------------------


class EmptyCell(PstratError):
    """No observations in a (Z, D) cell the estimator needs."""


class NearZeroDenominator(PstratError):
    """The estimated stratum proportion is numerically zero."""


# ---- cli / io -----------------------------------------------------------


class ConfigError(PstratError):
    """Invalid configuration (exit code 2)."""


class ParseError(PstratError):
    """Malformed input file (exit code 3)."""


class SchemaError(PstratError):
    """Input file lacks required columns (exit code 3)."""


class DomainError(PstratError):
    """Input values outside their allowed domain (exit code 3)."""
