"""Exception hierarchy shared by the package."""


class ConvexBPError(Exception):
    """Base class for all errors raised by convexbp."""


class GraphError(ConvexBPError, ValueError):
    """A factor graph violates one of its structural invariants."""


class DuplicateVariableInScope(GraphError):
    pass


class NonPositivePotential(GraphError):
    pass


class MultiIntersection(GraphError):
    pass


class IsolatedVariable(GraphError):
    pass


class ParseError(ConvexBPError, ValueError):
    """Malformed model or counts file.

    ``line`` is the 1-based line number where the problem was detected,
    or ``None`` when the error concerns the file as a whole.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionMismatch(ConvexBPError, ValueError):
    pass


class NotPairwise(ConvexBPError, ValueError):
    pass


class Disconnected(ConvexBPError, ValueError):
    pass


class Infeasible(ConvexBPError):
    pass


class SolverDidNotConverge(ConvexBPError):
    pass


class OracleFailure(ConvexBPError):
    pass


class NonFiniteValue(ConvexBPError, FloatingPointError):
    pass


class ConjugateUnavailable(ConvexBPError):
    pass


class TooLarge(ConvexBPError):
    pass


class WidthTooLarge(ConvexBPError):
    pass


class NonBinary(ConvexBPError, ValueError):
    pass


class DidNotConverge(ConvexBPError):
    """An iterative solver hit its iteration cap.

    The partial result is kept on the exception so no work is lost.
    """

    def __init__(self, message, result=None, trace=None):
        super().__init__(message)
        self.result = result
        self.trace = trace
