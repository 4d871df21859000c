"""Dense real linear algebra shared by the embedding, information and merge modules.

Everything here works on float64 numpy arrays and is a pure function of its inputs.
"""

import logging
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
from scipy.linalg import lapack
from scipy.spatial.distance import pdist, squareform
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from errors import (
    InsufficientSamplesError,
    InvalidInputError,
    NumericalFailureError,
    SingularMatrixError,
)

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-10
DEFAULT_RIDGE_FACTOR = 1e-9
POWER_ITERATION_RESTARTS = 3


class SpectralDecomposition(NamedTuple):
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns aligned with eigenvalues


class _ZeroIterate(Exception):
    pass


def as_dense(a, name="matrix"):
    """
    Validate and convert an input to a finite 2-D float64 array.

    Args:
        a: array-like
        name: label used in error messages

    Returns:
        np.ndarray: a C-contiguous float64 copy-or-view of `a`
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf entries")
    return np.ascontiguousarray(arr)


def symmetrize(a):
    return 0.5 * (a + a.T)


def require_square(a, name):
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")


def require_symmetric(a, name):
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise InvalidInputError(
            f"{name} is not symmetric (max |A - A^T| = {asym:.3e}, max |A| = {scale:.3e})"
        )


def sym_eig(a) -> SpectralDecomposition:
    """
    Eigendecomposition of a real symmetric matrix, eigenvalues sorted descending.

    The LAPACK driver returns ascending eigenvalues; they are reversed so that column j of
    `eigenvectors` belongs to the j-th largest eigenvalue.
    """
    a = as_dense(a, "A")
    require_square(a, "A")
    require_symmetric(a, "A")
    values, vectors = scipy.linalg.eigh(symmetrize(a))
    return SpectralDecomposition(values[::-1].copy(), np.ascontiguousarray(vectors[:, ::-1]))


def default_ridge(s):
    dim = s.shape[0]
    if dim == 0:
        return 0.0
    return DEFAULT_RIDGE_FACTOR * abs(float(np.trace(s))) / dim


def _cholesky_logdet_exact(s, ridge):
    shifted = s + ridge * np.eye(s.shape[0]) if ridge else s
    factor, info = lapack.dpotrf(shifted, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(
            f"Matrix + {ridge:g}*I is not positive definite", pivot=int(info) - 1
        )
    if info < 0:
        raise InvalidInputError(f"dpotrf rejected argument {-info}")
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def cholesky_logdet(s, ridge=None):
    """
    ln|S + ridge*I| through a Cholesky factorisation.

    Args:
        s: symmetric matrix
        ridge: non-negative diagonal shift. When None the factorisation is first tried
            unshifted and, only if it fails, retried with 1e-9 * trace(S) / dim.

    Returns:
        float: the log-determinant

    Raises:
        SingularMatrixError: the (shifted) matrix is not positive definite; carries the
            zero-based index of the failing pivot
    """
    s = as_dense(s, "S")
    require_square(s, "S")
    if s.shape[0] == 0:
        return 0.0
    if ridge is not None:
        if ridge < 0:
            raise InvalidInputError(f"ridge must be >= 0, got {ridge}")
        return _cholesky_logdet_exact(s, float(ridge))
    try:
        return _cholesky_logdet_exact(s, 0.0)
    except SingularMatrixError:
        fallback = default_ridge(s)
        logger.debug("Cholesky failed unshifted, retrying with ridge %.3e", fallback)
        return _cholesky_logdet_exact(s, fallback)


def cross_covariance(x, y):
    """
    Unbiased, mean-centred cross-covariance of paired samples.

    Args:
        x: N x p samples
        y: N x q samples

    Returns:
        np.ndarray: p x q matrix, divided by N - 1
    """
    x = as_dense(x, "X")
    y = as_dense(y, "Y")
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(
            f"X and Y must have the same number of rows, got {x.shape[0]} and {y.shape[0]}"
        )
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"Need at least 2 samples, got {n}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    return (xc.T @ yc) / (n - 1)


def covariance(samples):
    """Unbiased covariance of an N x d sample matrix (always exactly symmetric)."""
    samples = as_dense(samples, "samples")
    if samples.shape[0] < 2:
        raise InsufficientSamplesError(f"Need at least 2 samples, got {samples.shape[0]}")
    return symmetrize(cross_covariance(samples, samples))


def power_iteration_max_eig(
    apply: Callable[[np.ndarray], np.ndarray], dim: int, iters: int, seed: int
) -> float:
    """
    Dominant eigenvalue magnitude of a symmetric linear operator.

    Runs `iters` normalised iterations from a seeded Gaussian start and returns |v^T A v| of
    the final iterate. For indefinite operators this is the dominant |lambda|, which upper
    bounds the largest eigenvalue. If the operator annihilates the start vector the
    iteration restarts from seed + 1, seed + 2, ... and gives up after three restarts.

    Args:
        apply: matrix-vector oracle v -> A v
        dim: operator dimension
        iters: number of iterations (>= 1)
        seed: seed of the start vector
    """
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    if dim < 1:
        raise InvalidInputError(f"dim must be >= 1, got {dim}")

    def run(attempt_seed):
        rng = np.random.default_rng(attempt_seed)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        rayleigh = 0.0
        for _ in range(iters):
            w = np.asarray(apply(v), dtype=np.float64).reshape(dim)
            if not np.all(np.isfinite(w)):
                raise NumericalFailureError("Operator returned NaN/Inf during power iteration")
            rayleigh = float(v @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                raise _ZeroIterate()
            v = w / norm
        return abs(rayleigh)

    retrying = Retrying(
        stop=stop_after_attempt(POWER_ITERATION_RESTARTS + 1),
        retry=retry_if_exception_type(_ZeroIterate),
    )
    try:
        for attempt in retrying:
            with attempt:
                offset = attempt.retry_state.attempt_number - 1
                if offset:
                    logger.debug("Power iteration restart %d (seed %d)", offset, seed + offset)
                result = run(seed + offset)
    except RetryError:
        raise NumericalFailureError(
            f"Power iteration hit a zero iterate after {POWER_ITERATION_RESTARTS} restarts"
        )
    return result


def pairwise_sqdist(x):
    """Full N x N matrix of squared Euclidean distances (exactly symmetric, zero diagonal)."""
    x = as_dense(x, "X")
    return squareform(pdist(x, "sqeuclidean"))


def median_pairwise_sqdist(x):
    """
    Median of the N(N-1)/2 squared pairwise distances (mean of the middle two when even).
    """
    x = as_dense(x, "X")
    if x.shape[0] < 2:
        raise InsufficientSamplesError(f"Need at least 2 points, got {x.shape[0]}")
    return float(np.median(pdist(x, "sqeuclidean")))
