"""Small linear-algebra helpers shared by the moment, shape and fusion code.

All helpers accept a single matrix ``(..., n, n)`` or a stack of them.
"""

import logging

import numpy as np


logger = logging.getLogger(__name__)

# Eigenvalue ratio above which a symmetric matrix is treated as singular.
MAX_CONDITION = 1e12


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def jitter_amount(a: np.ndarray) -> np.ndarray:
    """Diagonal jitter λ = 1e-9 · trace/2 + 1e-12, one value per matrix."""
    trace = np.trace(a, axis1=-2, axis2=-1)
    return 1e-9 * np.abs(trace) / 2.0 + 1e-12


def _ill_conditioned(a: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(symmetrize(a))
    lo = eig[..., 0]
    hi = eig[..., -1]
    return ~(lo > 0) | (hi > MAX_CONDITION * np.where(lo > 0, lo, 1.0))


def regularize(a: np.ndarray) -> np.ndarray:
    """Return ``a`` with jitter added to the diagonals that need it.

    Only matrices that are not positive definite or whose condition number
    exceeds MAX_CONDITION are touched, so well-posed inversions stay exact.
    """
    a = np.asarray(a, dtype=np.float64)
    bad = _ill_conditioned(a)
    if not np.any(bad):
        return a
    n = a.shape[-1]
    lam = np.where(bad, jitter_amount(a), 0.0)
    logger.debug("Jitter added to %d ill-conditioned matrices", int(np.sum(bad)))
    return a + lam[..., None, None] * np.eye(n)


def stable_inv(a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite values")
    return np.linalg.inv(regularize(a))


def clamp_psd(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetrize and clamp eigenvalues at zero.

    Eigenvalues below ``-tol`` (scaled by the largest magnitude) are reported as
    an error since they cannot come from rounding alone.
    """
    a = symmetrize(np.asarray(a, dtype=np.float64))
    w, v = np.linalg.eigh(a)
    scale = np.maximum(np.max(np.abs(w), axis=-1, keepdims=True), 1.0)
    if np.any(w < -tol * scale):
        raise ValueError("matrix is not positive semi-definite")
    w = np.clip(w, 0.0, None)
    return symmetrize((v * w[..., None, :]) @ np.swapaxes(v, -1, -2))


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Factor L with L·Lᵀ = a for PSD matrices (eigen-based, zero-safe)."""
    w, v = np.linalg.eigh(symmetrize(np.asarray(a, dtype=np.float64)))
    return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]
