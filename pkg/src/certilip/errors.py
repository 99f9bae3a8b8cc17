class CertilipError(Exception):
    """Base class for errors raised by certilip."""


class ValidationError(CertilipError, ValueError):
    """Malformed input: bad shapes, bad files, inconsistent parameters."""


class NumericalError(CertilipError, ArithmeticError):
    """Non-finite values or a diverged optimisation."""
