"""Small dense kernels shared by the workloads and the FL protocol code.

Parameter vectors are plain 1-D float64 numpy arrays. Functions here never
mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DENSE_LIMIT = 64


class DimensionError(ValueError):
    """Raised when two operands have incompatible lengths."""


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    _check_same(a, b)
    return float(np.dot(a, b))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` as a new vector."""
    x, y = as_vector(x), as_vector(y)
    _check_same(x, y)
    return alpha * x + y


def scale(alpha: float, v) -> np.ndarray:
    return alpha * as_vector(v)


def l2_norm_sq(v) -> float:
    v = as_vector(v)
    return float(np.dot(v, v))


def softmax(z) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Accepts a single score vector or a 2-D batch of row vectors.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty array")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class RankOneMatrix:
    """The outer product ``factor @ factor.T``, kept in factored form."""

    factor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "factor", as_vector(self.factor))

    @property
    def n(self) -> int:
        return self.factor.shape[0]

    def matvec(self, v) -> np.ndarray:
        return rank_one_matvec(self, v)

    def dense(self) -> np.ndarray:
        # Debug/oracle use only; production paths stay factored.
        if self.n > DENSE_LIMIT:
            raise ValueError(f"refusing to densify a {self.n}x{self.n} outer product")
        return np.outer(self.factor, self.factor)


def rank_one_matvec(r: RankOneMatrix, v) -> np.ndarray:
    """Compute ``(g g^T) v`` as ``g * (g . v)`` without forming the matrix."""
    v = as_vector(v)
    _check_same(r.factor, v)
    return r.factor * float(np.dot(r.factor, v))
