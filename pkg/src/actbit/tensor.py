"""Dense linear-algebra substrate.

Vectors and matrices are plain float64 numpy arrays; a matrix row is one
output channel. The helpers here validate shape and finiteness at the
boundaries where user data enters the package.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def as_vector(data, name: str = "vector") -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matvec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``m @ x``.

    ``x`` may carry leading batch dimensions; the product is taken over its
    last axis, so ``x`` of shape (n, cols) yields (n, rows).
    """
    m = np.asarray(m, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or x.ndim < 1 or x.shape[-1] != m.shape[1]:
        raise ShapeError(f"cannot multiply {m.shape} matrix with {x.shape} input")
    return x @ m.T


def l2_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.dot(x, x)))


def frobenius_norm_sq(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))
