"""Minimal dense linear algebra used by compression and prediction.

Everything here operates on plain float64 ndarrays. General products and
reductions are done with numpy directly at the call sites; the only
operation with real content is the truncated SVD below.
"""

import numpy as np

from .errors import NumericError, ParameterError


def svd_top_r(m: np.ndarray, r: int) -> np.ndarray:
    """Top-r right singular vectors of a dense N x D matrix.

    Returns a D x r matrix V_r with orthonormal columns spanning the
    dominant right-singular subspace of ``m``. Among all rank-r orthonormal
    bases this minimises the reconstruction residual ``||m - m V V^T||_F``
    (ties possible when singular values repeat). Column signs are not
    specified; compare subspaces, not raw vectors.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ParameterError(f"expected a 2-D matrix, got shape {m.shape}")
    n, d = m.shape
    if not 1 <= r <= min(n, d):
        raise ParameterError(f"r={r} out of range for a {n}x{d} matrix")
    if not np.all(np.isfinite(m)):
        raise ParameterError("matrix contains non-finite entries")
    try:
        _, _, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # iteration cap exceeded in LAPACK
        raise NumericError(f"SVD did not converge: {exc}") from exc
    return vt[:r].T.copy()


def orthonormality_defect(v: np.ndarray) -> float:
    """Infinity-norm deviation of V^T V from the identity."""
    v = np.asarray(v, dtype=np.float64)
    gram = v.T @ v
    return float(np.max(np.abs(gram - np.eye(v.shape[1]))))


def reconstruction_residual(m: np.ndarray, v: np.ndarray) -> float:
    """Frobenius norm of ``m - m V V^T`` for an orthonormal basis V."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.linalg.norm(m - (m @ v) @ v.T))
