"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for input/assumption
failures, 3 for numerical guards, 4 for I/O problems.
"""


class HCJumpError(Exception):
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), "details": self.details}


class ValidationError(HCJumpError):
    exit_code = 2


class EmptyPhase(ValidationError):
    pass


class AsymmetricKernel(ValidationError):
    pass


class AsymmetricContrast(ValidationError):
    pass


class UnboundedContrast(ValidationError):
    pass


class DisconnectedFastPhase(ValidationError):
    pass


class NumericalGuardError(HCJumpError):
    exit_code = 3


class CompatibilityViolated(NumericalGuardError):
    pass


class SingularSystem(NumericalGuardError):
    pass


class ThetaMismatch(NumericalGuardError):
    pass


class PerronFailure(NumericalGuardError):
    pass


class NearSpectrumSolve(NumericalGuardError):
    pass


class StepBudgetExceeded(NumericalGuardError):
    pass


class ConvolutionGridTooCoarse(NumericalGuardError):
    pass


class QuadratureUnderResolved(NumericalGuardError):
    pass


class SampleSizeTooSmall(NumericalGuardError):
    pass


class IOFailure(HCJumpError):
    exit_code = 4
