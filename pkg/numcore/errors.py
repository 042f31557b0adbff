"""Exception hierarchy shared by every pdsm app."""

import numpy as np


class PdsmError(Exception):
    """Base class for all pipeline failures."""


class ShapeError(PdsmError, ValueError):
    """An array dimension does not match what the operation needs."""

    def __init__(self, axis, expected, actual, where=''):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        self.where = where
        prefix = f'{where}: ' if where else ''
        super().__init__(f'{prefix}{axis} mismatch (expected {expected}, got {actual})')


class NonFiniteError(PdsmError, ValueError):
    """Input contains NaN or infinite values."""


class ConvergenceError(PdsmError, ArithmeticError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f'{message} (residual {residual:.3e})')


class DivergenceError(PdsmError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f'training diverged at epoch {epoch} (loss {loss})')


class DatasetError(PdsmError, ValueError):
    """A dataset or manifest is incomplete or inconsistent."""

    def __init__(self, message, ids=()):
        self.ids = list(ids)
        if self.ids:
            message = f"{message}: {', '.join(str(i) for i in self.ids)}"
        super().__init__(message)


class StageError(PdsmError):
    """A pipeline stage failed; wraps the underlying cause."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f'stage {stage!r} failed: {cause}')


def check_finite(array, name='input'):
    """Raise NonFiniteError if the array holds NaN or inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f'{name} contains non-finite values')
    return array


class NotSymmetricError(PdsmError, ValueError):
    """A matrix that must be symmetric is not."""
