"""Exception hierarchy shared by every helipatch module."""


class HelipatchError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI."""

    code = "HelipatchError"
    exit_code = 1

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    def record(self):
        return {"error": self.code, "message": str(self), **self.details}


class UsageError(HelipatchError):
    code = "UsageError"
    exit_code = 2


class InvalidParameters(HelipatchError):
    code = "InvalidParameters"
    exit_code = 2


class NonSPDInput(HelipatchError):
    code = "NonSPDInput"


class NonSPDCoefficient(HelipatchError):
    code = "NonSPDCoefficient"


class InvalidResolution(HelipatchError):
    code = "InvalidResolution"
    exit_code = 2


class SolverDivergence(HelipatchError):
    code = "SolverDivergence"


class CoincidentPoints(HelipatchError):
    code = "CoincidentPoints"


class BoundarySource(HelipatchError):
    code = "BoundarySource"


class TooClose(HelipatchError):
    code = "TooClose"


class InfeasibleMass(HelipatchError):
    code = "InfeasibleMass"
    exit_code = 2


class UnderResolved(HelipatchError):
    code = "UnderResolved"
    exit_code = 2


class EmptySupport(HelipatchError):
    code = "EmptySupport"


class CFLViolation(HelipatchError):
    code = "CFLViolation"


class PerturbationInfeasible(HelipatchError):
    code = "PerturbationInfeasible"
