"""Exception hierarchy.

Two roots: :class:`InvalidInput` for contract violations (CLI exit code 1) and
:class:`NumericalFailure` for things that went wrong while computing (exit code 2).
"""


class BridgeSchedError(Exception):
    pass


class InvalidInput(BridgeSchedError, ValueError):
    pass


class NumericalFailure(BridgeSchedError, ArithmeticError):
    pass


# grids / curves
class NonMonotone(InvalidInput):
    pass


class BadEndpoints(InvalidInput):
    pass


class TooShort(InvalidInput):
    pass


class MeshOutOfHull(InvalidInput):
    pass


# analytic bridges
class TimeOutOfOpenInterval(InvalidInput):
    pass


class TimeOutOfDomain(InvalidInput):
    pass


class NonpositiveSigma(InvalidInput):
    pass


class DegenerateInput(InvalidInput):
    pass


class DegenerateCoupling(InvalidInput):
    pass


class NotConverged(NumericalFailure):
    def __init__(self, message, coupling=None, violation=None, iterations=None):
        super().__init__(message)
        self.coupling = coupling
        self.violation = violation
        self.iterations = iterations


class UnderflowAllComponents(NumericalFailure):
    pass


# estimation
class NonFiniteField(NumericalFailure):
    pass


class EmptyTimeSlice(InvalidInput):
    pass


class ScoreMismatch(InvalidInput):
    pass


# scheduling
class AllValuesNonFinite(InvalidInput):
    pass


class ZeroTotalMass(InvalidInput):
    pass


class BadSpec(InvalidInput):
    pass


class BadEps(InvalidInput):
    pass


class UnnormalizedDensity(InvalidInput):
    pass


# solvers / model
class NonFiniteState(NumericalFailure):
    def __init__(self, message, index=None, partial=None):
        super().__init__(message)
        self.index = index
        self.partial = partial


class NonFiniteParams(NumericalFailure):
    pass


class DivergedTraining(NumericalFailure):
    pass


# evaluation
class TooFewSamples(InvalidInput):
    pass


class NoMatchedUnits(InvalidInput):
    pass


class NfeMismatch(InvalidInput):
    pass


class ConfigError(InvalidInput):
    """Config validation failure; ``path`` is the dotted field path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
