"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class TCIError(Exception):
    exit_code = 1


class ValidationError(TCIError, ValueError):
    """Input data or configuration violates the schema or a model invariant."""

    exit_code = 2


class NumericalError(TCIError, ArithmeticError):
    """A numerical routine failed (non-finite objective, singular system, ...)."""

    exit_code = 4


class DomainError(NumericalError, ValueError):
    """A function was evaluated outside its mathematical domain."""


class InitializationError(NumericalError):
    pass
