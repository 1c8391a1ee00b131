"""Dense vector arithmetic shared by every module.

Parameter and gradient vectors are plain 1-D ``float64`` numpy arrays.
"""

from __future__ import annotations

import numpy as np

EPS_ZERO = 1e-12


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def zeros(n: int) -> np.ndarray:
    return np.zeros(n, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def check_finite(v: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.isfinite(v).all():
        raise NonFiniteError(f"non-finite entries in {what}")
    return v


def _seqsum(v: np.ndarray) -> float:
    # plain left-to-right accumulation (np.sum would use pairwise summation)
    if v.size == 0:
        return 0.0
    return float(np.cumsum(v)[-1])


def dot(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    _check_pair(a, b)
    return _seqsum(a * b)


def norm2(a) -> float:
    a = as_vector(a)
    return float(np.sqrt(_seqsum(a * a)))


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector is (numerically) zero."""
    a, b = as_vector(a), as_vector(b)
    _check_pair(a, b)
    na, nb = norm2(a), norm2(b)
    if na < EPS_ZERO or nb < EPS_ZERO:
        return 0.0
    c = dot(a, b) / (na * nb)
    assert abs(c) <= 1.0 + 1e-9, c
    return min(1.0, max(-1.0, c))


def axpy(y, alpha: float, x) -> np.ndarray:
    """Return ``y + alpha * x`` as a new vector."""
    y, x = as_vector(y), as_vector(x)
    _check_pair(y, x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = y + alpha * x
    return check_finite(out, "axpy result")
