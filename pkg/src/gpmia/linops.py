"""Dense SPD linear algebra with a jitter ladder.

Matrices are plain C-contiguous float64 numpy arrays. The factor / solve
inner loops run in the compiled kernel module when it is built.
"""
from dataclasses import dataclass

import numpy as np

from gpmia._backend import kernels
from gpmia.errors import DimensionMismatch, NotPositiveDefinite, NotSymmetric

JITTER_START = 1e-10
JITTER_GROWTH = 10.0
DEFAULT_MAX_JITTER = 1e-4
SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self):
        return self.lower.shape[0]

    def reconstruct(self):
        return self.lower @ self.lower.T


def as_matrix(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def check_symmetric(a, rtol=SYMMETRY_RTOL):
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"matrix is not square: {a.shape}")
    scale = max(np.max(np.abs(a)), 1e-300) if a.size else 1.0
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > rtol * scale:
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds {rtol:g} relative to {scale:.3e}")


def cholesky(a, max_jitter=None):
    """Cholesky factor of a symmetric matrix, adding diagonal jitter if needed.

    The unjittered matrix is tried first. On failure, jitter starts at
    ``1e-10 * mean(diag)`` and grows 10x per retry; the last attempt uses
    exactly ``max_jitter`` (default ``1e-4 * mean(diag)``).
    """
    a = as_matrix(a)
    check_symmetric(a)
    n = a.shape[0]
    if n == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)
    scale = float(np.mean(np.diag(a)))
    if not scale > 0.0:
        scale = 1.0
    if max_jitter is None:
        max_jitter = DEFAULT_MAX_JITTER * scale

    L, info = kernels.cholesky_lower(a, 0.0)
    if info == 0:
        return CholeskyFactor(L, 0.0)

    jitter = JITTER_START * scale
    while True:
        jitter = min(jitter, max_jitter)
        L, info = kernels.cholesky_lower(a, jitter)
        if info == 0:
            return CholeskyFactor(L, jitter)
        if jitter >= max_jitter:
            raise NotPositiveDefinite(
                f"factorization failed at pivot {info - 1} even with jitter {jitter:.3e}"
            )
        jitter *= JITTER_GROWTH


def _as_rhs(factor, b):
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != factor.n:
        raise DimensionMismatch(f"factor is {factor.n}x{factor.n}, right-hand side has {b.shape[0]} rows")
    vec = b.ndim == 1
    return np.ascontiguousarray(b.reshape(factor.n, -1)), vec


def solve_lower(factor, b):
    """Solve L x = b."""
    rhs, vec = _as_rhs(factor, b)
    x = kernels.solve_lower(factor.lower, rhs)
    return x[:, 0] if vec else x


def solve_lower_t(factor, b):
    """Solve L^T x = b."""
    rhs, vec = _as_rhs(factor, b)
    x = kernels.solve_lower_t(factor.lower, rhs)
    return x[:, 0] if vec else x


def solve_spd(factor, b):
    """Solve (a + jitter*I) x = b given the factor of a. Accepts vector or matrix b."""
    rhs, vec = _as_rhs(factor, b)
    x = kernels.solve_lower_t(factor.lower, kernels.solve_lower(factor.lower, rhs))
    return x[:, 0] if vec else x


def logdet(factor):
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def sq_dists(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    return kernels.sq_dists(a, b)
