"""Minimal dense linear-algebra substrate: float32 matrices, row normalization,
cosine-similarity matrices, ReLU, stable softmax helpers, and a central
finite-difference gradient probe.

All functions here are pure and carry no state; they are safe to call from
multiple threads concurrently. Arrays are treated as immutable inputs and a
fresh array is returned by every operation. Storage convention is float32,
but every operation preserves a float64 input so verification harnesses can
run the same code at higher precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimMismatchError, NonFiniteError, ZeroRowError

ZERO_ROW_TOL = 1e-12


def as_matrix(a, dtype=np.float32, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D array of the given dtype."""
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise DimMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return a


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def row_l2_normalize(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm.

    Raises ZeroRowError if any row has norm below 1e-12 (direction undefined).
    """
    m = np.asarray(m)
    norms = row_norms(m)
    if np.any(norms < ZERO_ROW_TOL):
        bad = int(np.argmin(norms))
        raise ZeroRowError(f"row {bad} has norm {norms[bad]:.3e} < {ZERO_ROW_TOL:g}")
    return m / norms[:, None]


def cosine_sim_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity: entry (i, j) = cos(a_i, b_j), clamped to [-1, 1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimMismatchError(f"expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise DimMismatchError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    an = row_l2_normalize(a)
    bn = row_l2_normalize(b)
    # Clamp rounding excursions so downstream bounds hold exactly.
    return np.clip(an @ bn.T, -1.0, 1.0)


def relu(m: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x); the message-passing activation."""
    return np.maximum(m, 0)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    hi = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - hi), axis=axis, keepdims=True)) + hi
    return np.squeeze(out, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - np.expand_dims(logsumexp(x, axis=axis), axis)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], at: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, probed entry by entry.

    `f` is called with a scratch copy of `at` and must not retain a reference
    to its argument between calls. Output is float64 regardless of the probe
    dtype. Raises NonFiniteError if any probe evaluates to NaN/Inf.
    """
    x = np.array(at, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"probe at flat index {i} evaluated to a non-finite value")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
