"""Permutation-invariant pooling of embedding bags.

A bag is an unordered set of N instance embeddings sharing one dimension M.
Four pooling operators fuse a bag into a single embedding:

* ``avg``   - arithmetic mean of the instances.
* ``max``   - per-feature maximum across instances.
* ``attn``  - weighted average with weights softmax(w . tanh(Z e_n)).
* ``gated`` - weighted average with weights
  softmax(w . (tanh(Z e_n) * sigm(G e_n))).

Every operator has an exact analytic backward pass (:func:`pool_backward`)
so the pooling parameters and the instances themselves can be trained with
plain gradient descent.  Two-dimensional instance representations (patch
grids) are pooled in flattened form and reshaped afterwards; see
:func:`flatten` / :func:`unflatten`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError, UsageError
from .numkern import (
    as_matrix,
    as_vector,
    hadamard,
    matvec,
    sigm_vec,
    softmax_stable,
    tanh_vec,
)

POOLING_KINDS = ("avg", "max", "attn", "gated")
ATTENTION_KINDS = ("attn", "gated")

# Default attention hidden width when a config does not specify one.
DEFAULT_ATTENTION_WIDTH = 64


@dataclass(frozen=True)
class InstanceEmbedding:
    """One instance of a bag: a flat float64 vector, optionally carrying the
    2-D (patches, dims) layout it was flattened from."""

    values: np.ndarray
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            inferred = (int(v.shape[0]), int(v.shape[1]))
            if self.shape is not None and tuple(self.shape) != inferred:
                raise ShapeError(
                    f"explicit shape {self.shape} does not match 2-D values {inferred}"
                )
            object.__setattr__(self, "shape", inferred)
            v = np.ascontiguousarray(v).reshape(-1)
        elif v.ndim != 1:
            raise ShapeError(f"instance values must be 1-D or 2-D, got {v.shape}")
        if v.size == 0:
            raise ShapeError("instance embedding must be nonempty")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("instance embedding contains NaN or Inf")
        if self.shape is not None:
            p, d = self.shape
            if p <= 0 or d <= 0 or p * d != v.size:
                raise ShapeError(
                    f"shape {self.shape} incompatible with {v.size} values"
                )
            object.__setattr__(self, "shape", (int(p), int(d)))
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def as_2d(self) -> np.ndarray:
        if self.shape is None:
            raise UsageError("instance has no 2-D shape")
        return self.values.reshape(self.shape)


@dataclass(frozen=True)
class Bag:
    """An unordered, variable-size set of same-dimension instances with an
    optional bag-level label."""

    id: str
    instances: tuple[InstanceEmbedding, ...]
    label: int | None = None
    meta: dict[str, str] | None = None

    def __post_init__(self):
        insts = tuple(self.instances)
        if not insts:
            raise ShapeError(f"bag {self.id!r} must contain at least one instance")
        m = insts[0].dim
        shape = insts[0].shape
        for i, inst in enumerate(insts):
            if inst.dim != m:
                raise ShapeError(
                    f"bag {self.id!r}: instance 0 has dim {m} but instance {i} has dim {inst.dim}"
                )
            if inst.shape != shape:
                raise ShapeError(
                    f"bag {self.id!r}: instances disagree on 2-D shape ({shape} vs {inst.shape})"
                )
        object.__setattr__(self, "instances", insts)
        if self.label is not None and int(self.label) < 0:
            raise ShapeError(f"bag {self.id!r}: label must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def dim(self) -> int:
        return self.instances[0].dim

    @property
    def instance_shape(self) -> tuple[int, int] | None:
        return self.instances[0].shape

    def matrix(self) -> np.ndarray:
        """Instances stacked row-wise into an (N, M) float64 array."""
        return np.stack([inst.values for inst in self.instances])

    @classmethod
    def from_array(cls, bag_id: str, values, label: int | None = None,
                   shape: tuple[int, int] | None = None,
                   meta: dict[str, str] | None = None) -> "Bag":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"from_array expects (N, M) values, got {arr.shape}")
        insts = tuple(InstanceEmbedding(row, shape=shape) for row in arr)
        return cls(id=bag_id, instances=insts, label=label, meta=meta)


@dataclass
class PoolingParams:
    """Parameters of one pooling operator.

    ``avg`` and ``max`` carry no arrays.  ``attn`` carries a score vector
    ``w`` (K,) and a projection ``Z`` (K, M); ``gated`` adds a gate
    projection ``G`` with the same shape as ``Z``.
    """

    kind: str
    w: np.ndarray | None = None
    Z: np.ndarray | None = None
    G: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise UsageError(
                f"unknown pooling kind {self.kind!r}; expected one of {POOLING_KINDS}"
            )
        if self.kind in ATTENTION_KINDS:
            if self.w is None or self.Z is None:
                raise UsageError(f"{self.kind} pooling requires w and Z")
            self.w = as_vector(self.w, "w")
            self.Z = as_matrix(self.Z, "Z")
            if self.Z.shape[0] != self.w.shape[0]:
                raise ShapeError(
                    f"w has {self.w.shape[0]} rows but Z is {self.Z.shape}"
                )
            if self.kind == "gated":
                if self.G is None:
                    raise UsageError("gated pooling requires G")
                self.G = as_matrix(self.G, "G")
                if self.G.shape != self.Z.shape:
                    raise ShapeError(f"G {self.G.shape} must match Z {self.Z.shape}")
            elif self.G is not None:
                raise UsageError("attn pooling carries no gate matrix G")
        else:
            if self.w is not None or self.Z is not None or self.G is not None:
                raise UsageError(f"{self.kind} pooling carries no learnable arrays")

    @property
    def hidden_width(self) -> int:
        return 0 if self.w is None else int(self.w.shape[0])

    @property
    def dim(self) -> int | None:
        return None if self.Z is None else int(self.Z.shape[1])

    @classmethod
    def parameter_free(cls, kind: str) -> "PoolingParams":
        return cls(kind=kind)

    @classmethod
    def random(cls, kind: str, hidden_width: int, dim: int,
               rng: np.random.Generator) -> "PoolingParams":
        """Initialize attention parameters uniformly on [-1/sqrt(K), 1/sqrt(K)],
        which keeps initial scores O(1)."""
        if kind not in ATTENTION_KINDS:
            return cls.parameter_free(kind)
        if hidden_width < 1:
            raise UsageError("attention hidden width must be positive")
        bound = 1.0 / math.sqrt(hidden_width)
        w = rng.uniform(-bound, bound, size=hidden_width)
        z = rng.uniform(-bound, bound, size=(hidden_width, dim))
        g = rng.uniform(-bound, bound, size=(hidden_width, dim)) if kind == "gated" else None
        return cls(kind=kind, w=w, Z=z, G=g)

    def param_count(self) -> int:
        total = 0
        for arr in (self.w, self.Z, self.G):
            if arr is not None:
                total += arr.size
        return total


@dataclass(frozen=True)
class PooledOutput:
    """Fused embedding plus per-instance weights.

    ``alpha`` is present for avg/attn/gated and sums to one; max pooling
    instead reports, per feature, the smallest instance index attaining the
    maximum."""

    E: np.ndarray
    alpha: np.ndarray | None = None
    argmax_index: np.ndarray | None = None


@dataclass
class PoolGradients:
    """Gradients of a scalar loss w.r.t. pooling parameters and instances."""

    d_instances: np.ndarray
    d_w: np.ndarray | None = None
    d_Z: np.ndarray | None = None
    d_G: np.ndarray | None = None


def _check_attention(params: PoolingParams, bag: Bag) -> None:
    if params.kind not in ATTENTION_KINDS:
        raise UsageError(
            f"attention scores require kind in {ATTENTION_KINDS}, got {params.kind!r}"
        )
    if params.dim != bag.dim:
        raise ShapeError(
            f"params expect dim {params.dim} but bag {bag.id!r} has dim {bag.dim}"
        )


def pool_avg(bag: Bag) -> PooledOutput:
    """Arithmetic mean of the instances; every weight is exactly 1/N."""
    x = bag.matrix()
    n = bag.size
    return PooledOutput(E=x.sum(axis=0) / n, alpha=np.full(n, 1.0 / n))


def pool_max(bag: Bag) -> PooledOutput:
    """Per-feature maximum across instances.

    Ties resolve to the smallest instance index, which also fixes where the
    backward pass routes gradient."""
    x = bag.matrix()
    return PooledOutput(E=x.max(axis=0), argmax_index=x.argmax(axis=0))


def attention_scores(params: PoolingParams, bag: Bag) -> np.ndarray:
    """Unnormalized attention score per instance.

    ``attn``:   s_n = w . tanh(Z e_n)
    ``gated``:  s_n = w . (tanh(Z e_n) * sigm(G e_n))
    """
    _check_attention(params, bag)
    scores = np.empty(bag.size)
    for n, inst in enumerate(bag.instances):
        t = tanh_vec(matvec(params.Z, inst.values))
        if params.kind == "gated":
            t = hadamard(t, sigm_vec(matvec(params.G, inst.values)))
        scores[n] = float(np.dot(params.w, t))
    return scores


def pool_attention(params: PoolingParams, bag: Bag) -> PooledOutput:
    """Softmax-weighted average of the instances."""
    alpha = softmax_stable(attention_scores(params, bag))
    return PooledOutput(E=alpha @ bag.matrix(), alpha=alpha)


def pool(params: PoolingParams, bag: Bag) -> PooledOutput:
    """Dispatch to the operator selected by ``params.kind``."""
    if params.kind == "avg":
        return pool_avg(bag)
    if params.kind == "max":
        return pool_max(bag)
    return pool_attention(params, bag)


def pool_backward(params: PoolingParams, bag: Bag,
                  upstream_dE: np.ndarray) -> PoolGradients:
    """Exact gradients of a loss w.r.t. parameters and instances.

    ``upstream_dE`` is dLoss/dE.  For the attention kinds the instance
    gradient includes both the direct alpha_n * dE term and the indirect
    path through the softmax weights; dropping the latter fails a finite
    difference check.
    """
    g = as_vector(upstream_dE, "upstream_dE")
    if g.shape[0] != bag.dim:
        raise ShapeError(
            f"upstream_dE has dim {g.shape[0]} but bag {bag.id!r} has dim {bag.dim}"
        )
    x = bag.matrix()
    n, m = x.shape

    if params.kind == "avg":
        return PoolGradients(d_instances=np.tile(g / n, (n, 1)))

    if params.kind == "max":
        arg = x.argmax(axis=0)
        d_inst = np.zeros((n, m))
        d_inst[arg, np.arange(m)] = g
        return PoolGradients(d_instances=d_inst)

    _check_attention(params, bag)
    w, z = params.w, params.Z

    tanhs = np.empty((n, w.shape[0]))
    gates = np.empty_like(tanhs) if params.kind == "gated" else None
    for i in range(n):
        tanhs[i] = tanh_vec(matvec(z, x[i]))
        if gates is not None:
            gates[i] = sigm_vec(matvec(params.G, x[i]))
    acts = tanhs if gates is None else tanhs * gates
    alpha = softmax_stable(acts @ w)

    # Softmax backward: dL/ds_n = alpha_n * (c_n - sum_j alpha_j c_j)
    # with c_n = dL/dalpha_n = g . e_n.
    c = x @ g
    r = alpha * (c - float(alpha @ c))

    d_w = r @ acts
    if gates is None:
        d_hidden = r[:, None] * w[None, :] * (1.0 - tanhs**2)
        d_gate_in = None
    else:
        d_act = r[:, None] * w[None, :]
        d_hidden = d_act * gates * (1.0 - tanhs**2)
        d_gate_in = d_act * tanhs * gates * (1.0 - gates)
    d_z = d_hidden.T @ x
    d_g = None if d_gate_in is None else d_gate_in.T @ x

    d_inst = alpha[:, None] * g[None, :] + d_hidden @ z
    if d_gate_in is not None:
        d_inst = d_inst + d_gate_in @ params.G

    return PoolGradients(d_instances=d_inst, d_w=d_w, d_Z=d_z, d_G=d_g)


def flatten(inst: InstanceEmbedding) -> InstanceEmbedding:
    """Drop the 2-D layout, keeping the row-major flat values."""
    if inst.shape is None:
        raise ShapeError("flatten requires an instance with a 2-D shape")
    return InstanceEmbedding(values=inst.values.copy())


def unflatten(inst: InstanceEmbedding, shape: tuple[int, int]) -> InstanceEmbedding:
    """Reattach a (patches, dims) layout to a flat instance."""
    p, d = int(shape[0]), int(shape[1])
    if p <= 0 or d <= 0 or p * d != inst.dim:
        raise ShapeError(
            f"cannot unflatten {inst.dim} values into shape ({p}, {d})"
        )
    return InstanceEmbedding(values=inst.values.copy(), shape=(p, d))
