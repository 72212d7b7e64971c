"""Exception hierarchy shared by every module."""


class DeanError(Exception):
    """Base class for all library errors."""


class ParameterError(DeanError, ValueError):
    """A numeric parameter is outside its admissible range."""


class StructuralError(DeanError, ValueError):
    """An input object violates a structural invariant (graph, weights, matrix)."""


class DomainError(DeanError, ValueError):
    """A query point is outside the domain of a function (e.g. non-finite)."""


class ConvergenceError(DeanError, RuntimeError):
    """An inner Newton solve did not reach its tolerance."""

    def __init__(self, message, grad_norm=float("nan"), iterations=0):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations


class SingularHessianError(DeanError, ArithmeticError):
    """A node Hessian is too ill-conditioned to factor."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
        self.trace = None


class DivergenceError(DeanError, RuntimeError):
    """Iterates left the finite range."""

    def __init__(self, message):
        super().__init__(message)
        self.trace = None


class EstimationError(DeanError, RuntimeError):
    """Constant estimation produced a degenerate value."""


class VerificationError(DeanError, ValueError):
    """A trace and a certificate report do not describe the same run."""
