"""Pure-Python (numpy) versions of the compiled kernels in ``_ckernels``.

Used when the extension is not built or when ``GPMIA_PURE_PYTHON=1``.
"""
import math

import numpy as np

BACKEND = "python"


def cholesky_lower(a, jitter):
    n = a.shape[0]
    L = np.zeros((n, n), dtype=np.float64)
    for j in range(n):
        s = a[j, j] + jitter - L[j, :j] @ L[j, :j]
        if not (s > 0.0) or not math.isfinite(s):
            return L, j + 1
        d = math.sqrt(s)
        L[j, j] = d
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / d
    return L, 0


def solve_lower(L, b):
    n = L.shape[0]
    x = np.empty((n, b.shape[1]), dtype=np.float64)
    for i in range(n):
        x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def solve_lower_t(L, b):
    n = L.shape[0]
    x = np.empty((n, b.shape[1]), dtype=np.float64)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
    return x


def sq_dists(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)
