"""Minimal deterministic float64 kernel used by every other module.

Vectors are 1-D and matrices 2-D row-major ``numpy.float64`` arrays.  All
operations are pure functions: identical inputs produce bit-identical
outputs, and nothing here mutates its arguments.  Finiteness of payloads is
enforced where data enters the system (bag construction, file loaders), so
the kernels themselves only check shapes.

Randomness flows through :func:`make_rng`, which pins a documented,
platform-independent generator (PCG64) so that a seed fully determines a
run on every machine.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "make_rng",
    "as_vector",
    "as_matrix",
    "matvec",
    "softmax_stable",
    "tanh_vec",
    "sigm_vec",
    "hadamard",
]


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the stream is reproducible across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a nonempty 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise ShapeError(f"{name} must be nonempty")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a nonempty 2-D row-major float64 array."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ShapeError(f"{name} must be nonempty")
    return m


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product accumulated in float64."""
    m = as_matrix(m, "matvec matrix")
    v = as_vector(v, "matvec vector")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(
            f"matvec shape mismatch: matrix {m.shape} vs vector ({v.shape[0]},)"
        )
    return m @ v


def softmax_stable(v) -> np.ndarray:
    """Softmax with max-subtraction so large scores cannot overflow.

    Output entries lie in [0, 1] and sum to 1 within 1e-12; the result is
    invariant to adding a constant to every score.
    """
    v = as_vector(v, "softmax input")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def tanh_vec(v) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(as_vector(v, "tanh input"))


def sigm_vec(v) -> np.ndarray:
    """Elementwise logistic sigmoid, stable for arguments of either sign."""
    v = as_vector(v, "sigmoid input")
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    a = as_vector(a, "hadamard lhs")
    b = as_vector(b, "hadamard rhs")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"hadamard length mismatch: ({a.shape[0]},) vs ({b.shape[0]},)"
        )
    return a * b
