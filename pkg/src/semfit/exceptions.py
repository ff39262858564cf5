"""Exception hierarchy shared across the package."""


class SemError(Exception):
    """Base class for all semfit errors."""


# --- model description / parsing ---

class ParseError(SemError):
    pass


class UnknownOperator(ParseError):
    pass


class MalformedTerm(ParseError):
    pass


class BadCommandArity(ParseError):
    pass


class UnbalancedParens(ParseError):
    pass


# --- model construction ---

class ModelError(SemError):
    pass


class UnknownParameterName(ModelError):
    pass


class DuplicateFixedLoading(ModelError):
    pass


class ConflictingClass(ModelError):
    pass


class CantCovary(ModelError):
    """A ``~~`` pair cannot be placed in any covariance matrix."""


class NotFitted(ModelError):
    pass


class MissingColumn(ModelError):
    pass


class InfeasibleConfig(ModelError):
    pass


# --- data ---

class DataError(SemError):
    pass


class TooFewRows(DataError):
    pass


class AllMissingColumn(DataError):
    pass


class EmptyRow(DataError):
    pass


# --- numerics ---

class NumericError(SemError):
    pass


class SingularResolvent(NumericError):
    """I - B is not invertible at the current point."""


class SigmaNotPD(NumericError):
    pass


class LNotPD(NumericError):
    pass


class TNotPD(NumericError):
    pass


class SingularS(NumericError):
    pass


class MissingWeightMatrix(NumericError):
    pass


class RankDeficientX2(NumericError):
    pass


class ObjectiveError(NumericError):
    pass


class ExogenousTarget(NumericError):
    pass


class SingularSigma22(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class SingularTi(NumericError):
    pass


class UnknownGroupLabel(NumericError):
    pass


class DimensionMismatch(NumericError):
    pass


class NegativeDt(NumericError):
    pass


class AsymmetricK(NumericError):
    pass


class DomainError(NumericError):
    pass


class CannotAchievePD(NumericError):
    pass


class NoClustersFound(NumericError):
    pass


class AllReplicatesFailed(NumericError):
    pass
