from __future__ import annotations


class FlowSacError(Exception):
    '''An abstract flowsac error

    All errors raised by the package derive from this class. The exit_code
    attribute is the process exit status the command line interface uses when
    the error escapes a subcommand.
    '''
    exit_code = 1

    def __init__(self, message: str | None = None):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return self.message or self.__class__.__name__


class ConfigError(FlowSacError):
    '''The configuration could not be used

    The configuration file is not valid JSON, contains an unknown key, misses a
    required key, or describes matrices with inconsistent dimensions. The
    message names the offending key.
    '''
    exit_code = 1

    def __init__(self, message: str | None = None, key: str | None = None):
        super().__init__(message)
        self.key = key


class CheckpointError(FlowSacError):
    '''A checkpoint file could not be read

    The file is not a flowsac checkpoint, was written by a newer format
    version, or its tensors do not match the shapes declared in its header.
    '''
    exit_code = 1


class NumericalError(FlowSacError):
    '''An abstract numerical failure'''
    exit_code = 2


class DimensionError(NumericalError):
    '''Operand shapes do not match

    Raised when two operands of a linear algebra, network or environment
    operation have incompatible dimensions.
    '''


class NonFiniteError(NumericalError):
    '''A NaN or infinite value was detected

    Non-finite values are rejected at the earliest point, usually when a
    matrix is constructed or a gradient is applied. The message identifies the
    offending tensor.
    '''


class NotPositiveDefiniteError(NumericalError):
    '''A matrix expected to be positive (semi)definite is not

    The Cholesky factorization failed or an eigenvalue is negative beyond the
    allowed slack.
    '''


class ConvergenceError(NumericalError):
    '''A fixed-point iteration did not converge

    The iteration exhausted its budget or its iterates became non-finite. For
    the Riccati solver this signals that (sqrt(gamma) A, sqrt(gamma) B) is not
    stabilizable.
    '''


class UnstableClosedLoopError(NumericalError):
    '''The closed loop of a gain is not stable under discounting

    The Lyapunov recursion of a fixed gain K only has a fixed point when
    sqrt(gamma) * rho(A - B K) < 1.
    '''

    def __init__(self, message: str | None = None, radius: float | None = None):
        super().__init__(message)
        self.radius = radius


class DivergentEstimateError(NumericalError):
    '''A Monte-Carlo estimate failed its variance diagnostic

    The estimated expectation is dominated by a handful of samples, which is
    what an infinite expectation looks like from a finite sample.
    '''

    def __init__(self, message: str | None = None, relative_stderr: float | None = None):
        super().__init__(message)
        self.relative_stderr = relative_stderr


class TrainingAborted(NumericalError):
    '''Training produced a non-finite loss

    The snapshot attribute holds the episode number, the last losses and
    importance weight statistics at the time of the failure.
    '''

    def __init__(self, message: str | None = None, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
