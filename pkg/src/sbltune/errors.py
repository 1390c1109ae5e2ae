"""Exception hierarchy shared by every module."""


class SBLError(Exception):
    """Base class for all package errors."""


class ParameterError(SBLError, ValueError):
    """An argument is outside its admissible domain."""


class DegenerateSpecError(ParameterError):
    """A generation spec can never produce a usable instance (e.g. rho=0)."""


class ZeroSignalError(ParameterError):
    """The noiseless observation A @ x is identically zero; redraw x."""


class DomainError(ParameterError):
    """Input lies outside the mathematical domain of a function."""


class FormatError(SBLError, ValueError):
    """A persisted file is malformed, truncated, or of the wrong version."""


class DimensionError(FormatError):
    """A persisted object does not match the dimensions of the caller."""


class TapeError(SBLError, RuntimeError):
    """A gradient tape is incomplete or inconsistent."""


class NumericalError(SBLError, ArithmeticError):
    """Non-finite intermediate, vanishing denominator, or failed factorization."""

    def __init__(self, message, iteration=None, line=None):
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.iteration = iteration
        self.line = line


class TrainingError(NumericalError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
