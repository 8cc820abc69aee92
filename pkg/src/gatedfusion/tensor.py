"""Minimal dense float64 kernel with hand-written vector-Jacobian products.

Everything is a plain ``numpy`` array in 64-bit floats.  The op set is
deliberately small: exactly what the fusion layers and linear heads need,
each paired with an exact VJP so every layer built on top can be checked
against finite differences.  All operations are pure; inputs are never
mutated and results are freshly allocated.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "as_vector",
    "as_matrix",
    "affine",
    "sigmoid",
    "l2_norm",
    "concat",
    "split",
    "hadamard",
    "affine_vjp",
    "sigmoid_vjp",
    "concat_vjp",
    "hadamard_vjp",
    "l2_norm_vjp",
    "vjp",
]


def as_vector(x: Sequence[float] | np.ndarray, dim: int | None = None,
              name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking its length."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D vector, got {arr.ndim}-D data")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeError(f"{name}: expected dim {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return arr


def as_matrix(x: Sequence[Sequence[float]] | np.ndarray, rows: int | None = None,
              cols: int | None = None, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally checking its shape."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got {arr.ndim}-D data")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"{name}: expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"{name}: expected {cols} cols, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return arr


def _check_vec(x: np.ndarray, name: str) -> None:
    if x.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D vector, got {x.ndim}-D data")


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b."""
    _check_vec(x, "affine: x")
    _check_vec(b, "affine: b")
    if W.ndim != 2:
        raise ShapeError(f"affine: W must be 2-D, got {W.ndim}-D data")
    if W.shape[1] != x.shape[0]:
        raise ShapeError(
            f"affine: W expects input dim {W.shape[1]}, got x of dim {x.shape[0]}")
    if W.shape[0] != b.shape[0]:
        raise ShapeError(
            f"affine: W produces dim {W.shape[0]}, but b has dim {b.shape[0]}")
    return W @ x + b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, computed branch-wise so neither tail
    overflows.  Output is strictly inside (0, 1) for finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def l2_norm(x: np.ndarray) -> float:
    # Rescaled by the largest magnitude so the squares cannot underflow or
    # overflow; homogeneity then holds across the whole float64 range.
    _check_vec(np.asarray(x), "l2_norm: x")
    if np.size(x) == 0:
        return 0.0
    m = float(np.max(np.abs(x)))
    if m == 0.0:
        return 0.0
    scaled = np.asarray(x) / m
    return m * float(np.sqrt(np.dot(scaled, scaled)))


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_vec(np.asarray(a), "concat: a")
    _check_vec(np.asarray(b), "concat: b")
    return np.concatenate([a, b])


def split(x: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`concat`: first ``n`` entries, then the rest."""
    _check_vec(x, "split: x")
    if not 0 <= n <= x.shape[0]:
        raise ShapeError(f"split: cannot take first {n} of a dim-{x.shape[0]} vector")
    return x[:n].copy(), x[n:].copy()


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_vec(np.asarray(a), "hadamard: a")
    _check_vec(np.asarray(b), "hadamard: b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"hadamard: dims differ, {a.shape[0]} vs {b.shape[0]}")
    return a * b


# --- vector-Jacobian products ------------------------------------------------
#
# Each *_vjp takes the forward inputs plus the upstream gradient and returns
# the exact gradient for every differentiable input, in input order.

def affine_vjp(x: np.ndarray, W: np.ndarray, b: np.ndarray,
               upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if upstream.shape != b.shape:
        raise ShapeError(
            f"affine_vjp: upstream dim {upstream.shape[0]}, expected {b.shape[0]}")
    dx = W.T @ upstream
    dW = np.outer(upstream, x)
    db = upstream.copy()
    return dx, dW, db


def sigmoid_vjp(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if np.shape(upstream) != np.shape(x):
        raise ShapeError("sigmoid_vjp: upstream shape differs from input")
    s = sigmoid(x)
    return upstream * s * (1.0 - s)


def concat_vjp(a: np.ndarray, b: np.ndarray,
               upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, m = np.shape(a)[0], np.shape(b)[0]
    if np.shape(upstream)[0] != n + m:
        raise ShapeError(f"concat_vjp: upstream dim {np.shape(upstream)[0]}, expected {n + m}")
    return split(upstream, n)


def hadamard_vjp(a: np.ndarray, b: np.ndarray,
                 upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if np.shape(upstream) != np.shape(a) or np.shape(a) != np.shape(b):
        raise ShapeError("hadamard_vjp: shapes disagree")
    return upstream * b, upstream * a


def l2_norm_vjp(x: np.ndarray, upstream: float) -> np.ndarray:
    # Subgradient 0 at the origin, where the norm is not differentiable.
    n = l2_norm(x)
    if n == 0.0:
        return np.zeros_like(x)
    return (float(upstream) / n) * x


_VJP_FUNCS = {
    "affine": lambda inputs, up: affine_vjp(*inputs, up),
    "sigmoid": lambda inputs, up: (sigmoid_vjp(*inputs, up),),
    "concat": lambda inputs, up: concat_vjp(*inputs, up),
    "hadamard": lambda inputs, up: hadamard_vjp(*inputs, up),
    "l2_norm": lambda inputs, up: (l2_norm_vjp(*inputs, up),),
}


def vjp(op_id: str, inputs: tuple, upstream) -> tuple:
    """Vector-Jacobian product of ``op_id`` at ``inputs``, one gradient per
    differentiable input."""
    try:
        fn = _VJP_FUNCS[op_id]
    except KeyError:
        known = ", ".join(sorted(_VJP_FUNCS))
        raise ValueError(f"vjp: unknown op {op_id!r} (known: {known})") from None
    return fn(tuple(inputs), upstream)
