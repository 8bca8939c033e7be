"""Per-element rotation projection for the shape-targeting local step."""
import numpy as np

from .._jit import njit
from ..transforms import polar_rotation


def project_rotations_numpy(F, A):
    """``R_e = polar(F_e A_e)`` for stacks of 3x3 matrices."""
    return polar_rotation(F @ A)


@njit
def _project_rotations_loop(F, A, out):
    M = np.empty((3, 3))
    for e in range(F.shape[0]):
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += F[e, i, k] * A[e, k, j]
                M[i, j] = acc
        U, s, Vt = np.linalg.svd(M)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
            for i in range(3):
                U[i, 2] = -U[i, 2]
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += U[i, k] * Vt[k, j]
                out[e, i, j] = acc


def project_rotations_numba(F, A):
    F = np.ascontiguousarray(F, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(A))):
        raise ValueError("non-finite matrix in polar decomposition")
    out = np.empty_like(F)
    _project_rotations_loop(F, A, out)
    return out
