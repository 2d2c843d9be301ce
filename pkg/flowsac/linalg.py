'''Dense real linear algebra helpers

Matrices and vectors are float64 numpy arrays validated on construction. The
factorizations are LAPACK routines reached through numpy and scipy; this module
adds the shape checks, finiteness checks and error types the rest of the
package relies on.
'''
from __future__ import annotations
import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike
from .errors import DimensionError, NonFiniteError, NotPositiveDefiniteError


Matrix = np.ndarray
Vector = np.ndarray

# Eigenvalues of a PSD input may come out slightly negative because of
# rounding. Anything below this threshold is a genuinely indefinite matrix.
PSD_SLACK = 1e-8


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def as_matrix(value: ArrayLike, name='matrix') -> Matrix:
    '''Convert value to a read-only 2-D float64 array

    Nested lists are interpreted in row-major order. Scalars become 1x1
    matrices. Non-finite entries are rejected eagerly.
    '''
    a = np.array(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise DimensionError(f'{name} must be two-dimensional, got shape {a.shape}')
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f'{name} contains non-finite entries')
    return _frozen(a)


def as_vector(value: ArrayLike, name='vector') -> Vector:
    a = np.array(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise DimensionError(f'{name} must be one-dimensional, got shape {a.shape}')
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f'{name} contains non-finite entries')
    return _frozen(a)


def check_square(a: Matrix, name='matrix'):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f'{name} must be square, got shape {a.shape}')


def symmetrize(a: Matrix) -> Matrix:
    return 0.5 * (a + a.T)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f'Cannot multiply {a.shape} by {b.shape}')
    return a @ b


def cholesky(a: Matrix, name='matrix'):
    '''Return the lower Cholesky factor of a symmetric positive definite matrix'''
    check_square(a, name)
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f'{name} is not positive definite: {e}') from e
    except ValueError as e:
        raise NonFiniteError(f'{name} contains non-finite entries') from e


def is_spd(a: Matrix) -> bool:
    try:
        cholesky(a)
    except NotPositiveDefiniteError:
        return False
    return True


def solve_spd(a: Matrix, b: Matrix) -> Matrix:
    '''Solve a X = b for symmetric positive definite a

    Uses a Cholesky factorization, so the residual is at the level of the
    condition number times machine precision.
    '''
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f'Cannot solve {a.shape} system with right-hand side {b.shape}')
    factor = cholesky(a)
    return scipy.linalg.cho_solve(factor, b)


def logdet_spd(a: Matrix) -> float:
    c, _ = cholesky(a)
    return float(2.0 * np.sum(np.log(np.diag(c))))


def spectral_radius(a: Matrix, tol: float | None = None) -> float:
    '''Largest eigenvalue modulus of a square matrix

    The eigenvalues come from LAPACK's nonsymmetric solver and are accurate to
    machine precision. tol is the accuracy the caller requires; it only exists
    for API compatibility with iterative solvers, must be positive, and does
    not change the result.
    '''
    if tol is not None and not tol > 0:
        raise ValueError(f'tol must be positive, got {tol}')
    check_square(a)
    if a.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def sym_psd_sqrt(a: Matrix) -> Matrix:
    '''Symmetric square root of a symmetric positive semidefinite matrix

    Eigenvalues in [-PSD_SLACK, 0) are treated as zero. The returned root is
    symmetrized so that it is symmetric to rounding.
    '''
    check_square(a)
    w, v = np.linalg.eigh(symmetrize(a))
    if w.size and w.min() < -PSD_SLACK:
        raise NotPositiveDefiniteError(f'Matrix has negative eigenvalue {w.min():.3e}')
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return symmetrize(root)


def min_eigenvalue(a: Matrix) -> float:
    check_square(a)
    return float(np.linalg.eigvalsh(symmetrize(a)).min())
