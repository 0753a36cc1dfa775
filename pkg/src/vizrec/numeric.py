"""Dense float64 primitives shared by the model code.

Vectors and matrices are plain ``numpy`` arrays; the functions here add the
shape checks and finiteness guarantees the models rely on.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operands do not conform."""


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def dot(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: length mismatch {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def matvec(m, x) -> np.ndarray:
    m, x = as_matrix(m), as_vector(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: {m.shape} incompatible with length {x.shape[0]}")
    return m @ x


def affine(w, x, b) -> np.ndarray:
    """Layer transform ``W^T x + b``.

    ``W`` is stored input-major, shape ``(len(x), len(b))``.
    """
    w, x, b = as_matrix(w), as_vector(x), as_vector(b)
    if w.shape != (x.shape[0], b.shape[0]):
        raise ShapeError(
            f"affine: W {w.shape} does not map length {x.shape[0]} to {b.shape[0]}"
        )
    return x @ w + b


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_grad(pre) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return (np.asarray(pre) > 0.0).astype(DTYPE)


def concat(a, b) -> np.ndarray:
    return np.concatenate([as_vector(a), as_vector(b)])


def hadamard(a, b) -> np.ndarray:
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: length mismatch {a.shape[0]} vs {b.shape[0]}")
    return a * b


def init_gaussian(rows: int, cols: int, std: float, rng: np.random.Generator) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal(0.0, std, size=(rows, cols)).astype(DTYPE, copy=False)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective while perturbing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all coordinates."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
