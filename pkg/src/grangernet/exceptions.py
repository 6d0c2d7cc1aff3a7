"""Exception hierarchy shared by the library and the command line."""


class GrangerNetError(Exception):
    """Base class for all package errors."""


class ValidationError(GrangerNetError, ValueError):
    """Invalid input: bad shapes, infeasible settings, unsupported options."""


class UnstableModelError(ValidationError):
    """A VAR model whose companion matrix has spectral radius >= 1."""


class NumericalError(GrangerNetError, ArithmeticError):
    """A numerical failure such as solver divergence or a singular system."""
