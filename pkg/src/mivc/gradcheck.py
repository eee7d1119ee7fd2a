"""Finite-difference verification of the analytic gradients.

Central differences with step h on a scalar probe loss; relative error
uses max(|analytic|, |numeric|, 1e-8) as the denominator so zero
gradients compare cleanly.  The attention kinds are smooth everywhere,
so no special handling is needed; max pooling and the rectified
projection are only checked away from their kinks (ties resp. zero
pre-activations), where the derivative exists.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import UsageError
from .model import Model, TrainConfig, build_model, loss_and_grads
from .pooling import (
    ATTENTION_KINDS,
    Bag,
    PoolingParams,
    pool,
    pool_backward,
)

DEFAULT_STEP = 1e-5
TOLERANCE = 1e-5

# Scale of the random upstream probe vector.  The backward pass is linear
# in the probe, so any scale verifies the same Jacobian; a small probe
# keeps the finite-difference roundoff floor (~1e-16/h of the loss
# magnitude) below the 1e-8 denominator floor of the relative error, so
# near-zero gradient entries are absolute-tested instead of drowning in
# oracle noise.  1e-4 leaves a >10x empirical margin at tolerance 1e-5
# while typical entries stay far above the floor and are relative-tested.
PROBE_SCALE = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _probe_loss(params: PoolingParams, bag: Bag, upstream: np.ndarray) -> float:
    return float(upstream @ pool(params, bag).E)


def _fd_array(make_loss, arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences over every entry of ``arr`` (modified in place)."""
    out = np.empty_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = make_loss()
        flat[i] = orig - h
        lo = make_loss()
        flat[i] = orig
        out.reshape(-1)[i] = (hi - lo) / (2.0 * h)
    return out


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def pool_gradcheck_trial(kind: str, rng: np.random.Generator,
                         h: float = DEFAULT_STEP,
                         corrupt: bool = False) -> dict[str, float]:
    """One random (params, bag, upstream) triple; returns the max relative
    error per parameter group.  ``corrupt`` deliberately damages one
    analytic entry — the negative control for the checker itself."""
    if kind not in ATTENTION_KINDS:
        raise UsageError(f"gradient check covers {ATTENTION_KINDS}, not {kind!r}")
    n = int(rng.integers(1, 9))
    m = int(rng.integers(2, 13))
    k = int(rng.integers(1, 13))
    params = PoolingParams.random(kind, k, m, rng)
    values = rng.normal(size=(n, m))
    bag = Bag.from_array("gradcheck", values)
    upstream = PROBE_SCALE * rng.normal(size=m)

    grads = pool_backward(params, bag, upstream)
    d_w = grads.d_w.copy()
    if corrupt:
        d_w[0] += 1e-2

    errors: dict[str, float] = {}

    # Mutable copies drive the finite differences; params objects are
    # rebuilt around them so each probe sees the perturbed values.
    w = params.w.copy()
    z = params.Z.copy()
    g = params.G.copy() if params.G is not None else None

    def loss():
        return _probe_loss(replace(params, w=w, Z=z, G=g), bag, upstream)

    errors["w"] = _max_rel_err(d_w, _fd_array(loss, w, h))
    errors["Z"] = _max_rel_err(grads.d_Z, _fd_array(loss, z, h))
    if g is not None:
        errors["G"] = _max_rel_err(grads.d_G, _fd_array(loss, g, h))

    def inst_loss():
        return _probe_loss(params, Bag.from_array("gradcheck", values), upstream)

    errors["instances"] = _max_rel_err(
        grads.d_instances, _fd_array(inst_loss, values, h))
    return errors


@dataclass(frozen=True)
class GradCheckResult:
    kind: str
    trials: int
    max_errors: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_errors.values())


def run_pool_gradcheck(kind: str, trials: int, seed: int,
                       h: float = DEFAULT_STEP,
                       corrupt: bool = False) -> GradCheckResult:
    """Aggregate worst-case relative errors over ``trials`` random triples."""
    if trials < 1:
        raise UsageError("trials must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    worst: dict[str, float] = {}
    for _ in range(trials):
        for group, err in pool_gradcheck_trial(kind, rng, h=h,
                                               corrupt=corrupt).items():
            worst[group] = max(worst.get(group, 0.0), err)
    return GradCheckResult(kind=kind, trials=trials, max_errors=worst)


# --- end-to-end model check -------------------------------------------------

def _model_arrays(model: Model, grads) -> list[tuple[str, np.ndarray, np.ndarray]]:
    named = []
    mapping = [
        ("encoder.W", model.encoder, "W", grads.encoder_W),
        ("encoder.b", model.encoder, "b", grads.encoder_b),
        ("pool.w", model.pool_params, "w", grads.pool_w),
        ("pool.Z", model.pool_params, "Z", grads.pool_Z),
        ("pool.G", model.pool_params, "G", grads.pool_G),
        ("concat.W1", model.concat_params, "W1", grads.concat_W1),
        ("concat.W2", model.concat_params, "W2", grads.concat_W2),
        ("head.W", model.head, "W", grads.head_W),
        ("head.b", model.head, "b", grads.head_b),
    ]
    for name, owner, attr, grad in mapping:
        if grad is not None:
            named.append((name, getattr(owner, attr), grad))
    return named


def model_gradcheck(config: TrainConfig, bags,
                    h: float = DEFAULT_STEP) -> dict[str, float]:
    """Finite-difference check of the whole training loss, per parameter
    block.  The model is built from the config seed; bags supply the batch."""
    bags = list(bags)
    model = build_model(config)
    _, grads = loss_and_grads(model, bags)

    def loss():
        return loss_and_grads(model, bags)[0]

    errors: dict[str, float] = {}
    for name, arr, grad in _model_arrays(model, grads):
        errors[name] = _max_rel_err(grad, _fd_array(loss, arr, h))
    return errors
