"""Non-learned and concatenation alternatives to bag pooling.

Three strategies the pooling operators are benchmarked against:

* :func:`single_first` keeps only the first instance.
* :func:`grid_concat` tiles shaped instances into a square grid with blank
  fill, the embedding-space analog of concatenating images.
* :func:`concat_project` concatenates up to ``max_images`` instance
  vectors (zero-padded, tail truncated) and projects back to dimension M
  through a two-layer rectifier network.

None of these is permutation-invariant; the tests assert that explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .numkern import as_matrix, matvec
from .pooling import Bag, InstanceEmbedding, PooledOutput

DEFAULT_MAX_IMAGES = 6


@dataclass(frozen=True)
class GridSpec:
    """Square-grid layout for N instances: side = ceil(sqrt(N))."""

    side: int
    filled: int
    blank_value: float = 0.0

    def __post_init__(self):
        if self.side < 1 or self.filled < 1 or self.side**2 < self.filled:
            raise ShapeError(
                f"invalid grid: side {self.side} holds at most {self.side**2} cells, "
                f"got {self.filled}"
            )

    @property
    def blank_cells(self) -> int:
        return self.side**2 - self.filled


def grid_spec_for(n_instances: int, blank_value: float = 0.0) -> GridSpec:
    side = math.isqrt(n_instances)
    if side * side < n_instances:
        side += 1
    return GridSpec(side=side, filled=n_instances, blank_value=blank_value)


def single_first(bag: Bag) -> PooledOutput:
    """Use only the first instance; order-sensitive by construction."""
    alpha = np.zeros(bag.size)
    alpha[0] = 1.0
    return PooledOutput(E=bag.instances[0].values.copy(), alpha=alpha)


def grid_concat(bag: Bag, blank_value: float = 0.0,
                min_side: int | None = None) -> InstanceEmbedding:
    """Tile shaped (P, D) instances row-major into a square grid.

    The grid is ceil(sqrt(N)) cells per side (4 instances -> 2x2, 5 to 9
    -> 3x3, ...) and unused cells are filled with ``blank_value``.  An
    explicit ``min_side`` pads further, which a training harness uses to
    keep the output dimension constant across bags of different sizes.
    """
    shape = bag.instance_shape
    if shape is None:
        raise UsageError(
            f"grid_concat requires shaped instances; bag {bag.id!r} has flat embeddings"
        )
    p, d = shape
    spec = grid_spec_for(bag.size, blank_value)
    side = spec.side if min_side is None else max(spec.side, int(min_side))
    cells = np.full((side, side, p, d), float(blank_value))
    for n, inst in enumerate(bag.instances):
        cells[n // side, n % side] = inst.as_2d()
    big = cells.transpose(0, 2, 1, 3).reshape(side * p, side * d)
    return InstanceEmbedding(values=big)


def grid_concat_backward(bag: Bag, d_output: np.ndarray,
                         min_side: int | None = None) -> np.ndarray:
    """Scatter a gradient on the flattened grid back to the (N, M) instances."""
    p, d = bag.instance_shape if bag.instance_shape is not None else (1, bag.dim)
    spec = grid_spec_for(bag.size)
    side = spec.side if min_side is None else max(spec.side, int(min_side))
    d_cells = np.asarray(d_output, dtype=np.float64).reshape(
        side, p, side, d).transpose(0, 2, 1, 3)
    d_inst = np.empty((bag.size, bag.dim))
    for n in range(bag.size):
        d_inst[n] = d_cells[n // side, n % side].reshape(-1)
    return d_inst


@dataclass
class ConcatProjParams:
    """Two-layer projection of the concatenated leading instances.

    ``W1`` maps the (max_images * M) concatenation to a hidden layer,
    ``W2`` maps the rectified hidden layer back to M.
    """

    max_images: int
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        if self.max_images < 1:
            raise UsageError("max_images must be positive")
        self.W1 = as_matrix(self.W1, "W1")
        self.W2 = as_matrix(self.W2, "W2")
        if self.W2.shape[1] != self.W1.shape[0]:
            raise ShapeError(
                f"W2 {self.W2.shape} does not compose with W1 {self.W1.shape}"
            )
        if self.W1.shape[1] % self.max_images != 0:
            raise ShapeError(
                f"W1 input width {self.W1.shape[1]} is not a multiple of "
                f"max_images {self.max_images}"
            )

    @property
    def hidden_dim(self) -> int:
        return int(self.W1.shape[0])

    @property
    def dim(self) -> int:
        return int(self.W2.shape[0])

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator,
               max_images: int = DEFAULT_MAX_IMAGES,
               hidden_dim: int = 64) -> "ConcatProjParams":
        fan1 = max_images * dim
        w1 = rng.uniform(-1.0 / math.sqrt(fan1), 1.0 / math.sqrt(fan1),
                         size=(hidden_dim, fan1))
        w2 = rng.uniform(-1.0 / math.sqrt(hidden_dim), 1.0 / math.sqrt(hidden_dim),
                         size=(dim, hidden_dim))
        return cls(max_images=max_images, W1=w1, W2=w2)

    def param_count(self) -> int:
        return int(self.W1.size + self.W2.size)


def _concat_input(params: ConcatProjParams, bag: Bag) -> np.ndarray:
    m = params.W1.shape[1] // params.max_images
    if bag.dim != m:
        raise ShapeError(
            f"projection expects instances of dim {m}, bag {bag.id!r} has dim {bag.dim}"
        )
    x = np.zeros(params.max_images * m)
    for n, inst in enumerate(bag.instances[: params.max_images]):
        x[n * m:(n + 1) * m] = inst.values
    return x


def concat_project(params: ConcatProjParams, bag: Bag) -> np.ndarray:
    """out = W2 . relu(W1 . concat(e_1 .. e_max_images)).

    Instances beyond ``max_images`` are dropped from the tail; missing
    slots are zero-padded.
    """
    x = _concat_input(params, bag)
    pre = matvec(params.W1, x)
    return matvec(params.W2, np.maximum(pre, 0.0))


def concat_project_backward(params: ConcatProjParams, bag: Bag,
                            d_output: np.ndarray):
    """Gradients of a loss w.r.t. W1, W2 and the instances.

    Returns (d_W1, d_W2, d_instances) with d_instances shaped (N, M);
    rows beyond ``max_images`` are zero because those instances never
    enter the forward pass.
    """
    d_out = np.asarray(d_output, dtype=np.float64)
    if d_out.shape != (params.dim,):
        raise ShapeError(
            f"upstream gradient has shape {d_out.shape}, expected ({params.dim},)"
        )
    x = _concat_input(params, bag)
    pre = params.W1 @ x
    hidden = np.maximum(pre, 0.0)

    d_w2 = np.outer(d_out, hidden)
    d_hidden = params.W2.T @ d_out
    d_pre = d_hidden * (pre > 0.0)
    d_w1 = np.outer(d_pre, x)
    d_x = params.W1.T @ d_pre

    m = bag.dim
    d_inst = np.zeros((bag.size, m))
    for n in range(min(bag.size, params.max_images)):
        d_inst[n] = d_x[n * m:(n + 1) * m]
    return d_w1, d_w2, d_inst
