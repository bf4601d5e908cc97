"""Numerical kernels shared by the rest of the package.

Everything is float64. Vectors and matrices are plain ``numpy.ndarray``
objects; the helpers here only add the validation and the stable
formulations the rest of the code relies on.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

RNG_ALGORITHM = "numpy-PCG64"


class DegenerateInputError(ValueError):
    """Raised when an input has zero norm where a direction is needed."""


class NumericError(ArithmeticError):
    """Raised when a function evaluation produces a non-finite value."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


def as_vec(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    return v


def _check_nonempty_finite(z: np.ndarray, name: str) -> None:
    if z.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} must be finite")


def softmax(z, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    _check_nonempty_finite(z, "z")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_nonempty_finite(z, "z")
    return z - log_sum_exp(z, axis=axis, keepdims=True)


def log_sum_exp(z, axis: int | None = None, keepdims: bool = False):
    """Stable ``log(sum(exp(z)))``; returns a float when reducing everything."""
    z = np.asarray(z, dtype=np.float64)
    _check_nonempty_finite(z, "z")
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if np.ndim(out) == 0:
        return float(out)
    return out


def cosine_similarity(a, b) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def fd_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not h > 0:
        raise ValueError("h must be positive")
    theta = as_vec(theta, "theta").copy()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}", coordinate=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def make_rng(seed: int) -> np.random.Generator:
    """A PCG64 generator; the same seed replays the same stream everywhere."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(base_seed: int, *key) -> int:
    """Child seed from a base seed and a hashable key, independent of call order."""
    text = repr((int(base_seed),) + tuple(key)).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")
