class LcarError(Exception):
    pass


class ValidationError(LcarError):
    """Bad input or an unmet precondition. The CLI exits with code 1."""


class NumericalError(LcarError):
    """A numerical routine failed on valid input. The CLI exits with code 2."""


class IndexOutOfRange(ValidationError, IndexError):
    pass


class SelfLoop(ValidationError):
    pass


class NonPositiveEpsilon(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class SingularDesign(ValidationError):
    pass


class EmptyPriorData(ValidationError):
    pass


class MissingLogDetCache(ValidationError):
    pass


class InconsistentUnits(ValidationError):
    pass


class NonPositiveExpected(ValidationError):
    pass


class ConstantResiduals(ValidationError):
    pass


class EmptyTrace(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, path, line, message) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class NotPositiveDefinite(NumericalError):
    pass


class DegenerateProposal(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class NoBracket(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass
