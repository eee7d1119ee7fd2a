"""Desk-scale end-to-end model: encoder -> bag fusion -> linear classifier.

The fusion stage is pluggable: the four pooling operators plus the three
baseline strategies, so one training loop serves the whole benchmark.

* ``avg`` / ``max`` / ``attn`` / ``gated`` - pooling operators.
* ``single`` - first instance only.
* ``grid``   - square-grid concatenation, flattened (dimension fixed per
  run via ``grid_side``).
* ``concat`` - truncated embedding concatenation with a trainable
  two-layer projection.

Heads and encoders are linear-algebra small; the classifier stands in for
the frozen language model the fused embedding would normally feed, and the
loss is cross-entropy over its logits.  Everything is deterministic given
the config seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import baselines
from .errors import DataError, ShapeError, UsageError
from .numkern import make_rng
from .pooling import (
    ATTENTION_KINDS,
    DEFAULT_ATTENTION_WIDTH,
    POOLING_KINDS,
    Bag,
    InstanceEmbedding,
    PooledOutput,
    PoolingParams,
    pool,
    pool_backward,
)

STRATEGIES = POOLING_KINDS + ("single", "grid", "concat")
ENCODER_KINDS = ("identity", "mlp1")
OPTIMIZERS = ("sgd", "adam")

CHECKPOINT_MAGIC = b"MIVM"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """Per-instance encoder: identity, or one tanh layer e = tanh(W x + b)."""

    kind: str = "identity"
    W: np.ndarray | None = None
    b: np.ndarray | None = None
    frozen: bool = True

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise UsageError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "mlp1":
            if self.W is None or self.b is None:
                raise UsageError("mlp1 encoder requires W and b")
            self.W = np.asarray(self.W, dtype=np.float64)
            self.b = np.asarray(self.b, dtype=np.float64)
            if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
                raise ShapeError(
                    f"encoder arrays disagree: W {self.W.shape}, b {self.b.shape}"
                )
        elif self.W is not None or self.b is not None:
            raise UsageError("identity encoder carries no arrays")

    def param_count(self) -> int:
        return 0 if self.kind == "identity" else int(self.W.size + self.b.size)


@dataclass
class HeadParams:
    """Linear classifier over the fused embedding."""

    W: np.ndarray  # (C, fused_dim)
    b: np.ndarray  # (C,)
    frozen: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"head arrays disagree: W {self.W.shape}, b {self.b.shape}")
        if self.W.shape[0] < 2:
            raise UsageError("head needs at least two classes")

    @property
    def n_classes(self) -> int:
        return int(self.W.shape[0])

    def param_count(self) -> int:
        return int(self.W.size + self.b.size)


@dataclass
class TrainConfig:
    """Complete recipe for one training run; every field has a default so
    configs stay small, and the seed pins all randomness."""

    strategy: str = "attn"
    m_in: int = 16
    m: int = 16
    k: int = DEFAULT_ATTENTION_WIDTH
    c: int = 2
    encoder: str = "identity"
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    freeze_encoder: bool = True
    freeze_head: bool = False
    optimizer: str = "sgd"
    max_images: int = baselines.DEFAULT_MAX_IMAGES
    hidden_dim: int = 64
    grid_side: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}; expected {STRATEGIES}")
        if self.encoder not in ENCODER_KINDS:
            raise UsageError(f"unknown encoder {self.encoder!r}")
        if self.optimizer not in OPTIMIZERS:
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.encoder == "identity" and self.m != self.m_in:
            raise UsageError(
                f"identity encoder requires m == m_in, got {self.m} vs {self.m_in}"
            )
        # lr = 0 is allowed so that a "train must be a no-op" guard is testable.
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if self.c < 2:
            raise UsageError("need at least two classes")
        if min(self.m_in, self.m, self.k, self.max_images, self.hidden_dim) < 1:
            raise UsageError("dimensions must be positive")


@dataclass
class Model:
    strategy: str
    encoder: EncoderParams
    head: HeadParams
    pool_params: PoolingParams | None = None
    concat_params: baselines.ConcatProjParams | None = None
    grid_side: int | None = None
    config: TrainConfig | None = None

    def fused_dim(self) -> int:
        return int(self.head.W.shape[1])


def fused_dim_for(config: TrainConfig) -> int:
    if config.strategy == "grid":
        if config.grid_side is None:
            raise UsageError("grid strategy requires grid_side to be resolved")
        return config.grid_side**2 * config.m
    return config.m


def build_model(config: TrainConfig, rng: np.random.Generator | None = None) -> Model:
    """Initialize all parameter blocks from the config seed.

    Weight matrices start uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)];
    biases start at zero.  Draw order is fixed (encoder, pooling, concat,
    head) so a seed fully determines the model.
    """
    rng = make_rng(config.seed) if rng is None else rng

    if config.encoder == "mlp1":
        bound = 1.0 / math.sqrt(config.m_in)
        enc = EncoderParams(
            kind="mlp1",
            W=rng.uniform(-bound, bound, size=(config.m, config.m_in)),
            b=np.zeros(config.m),
            frozen=config.freeze_encoder,
        )
    else:
        enc = EncoderParams(kind="identity", frozen=config.freeze_encoder)

    pool_params = None
    concat_params = None
    if config.strategy in POOLING_KINDS:
        pool_params = PoolingParams.random(config.strategy, config.k, config.m, rng)
    elif config.strategy == "concat":
        concat_params = baselines.ConcatProjParams.random(
            config.m, rng, max_images=config.max_images, hidden_dim=config.hidden_dim
        )

    fused = fused_dim_for(config)
    bound = 1.0 / math.sqrt(fused)
    head = HeadParams(
        W=rng.uniform(-bound, bound, size=(config.c, fused)),
        b=np.zeros(config.c),
        frozen=config.freeze_head,
    )
    return Model(strategy=config.strategy, encoder=enc, head=head,
                 pool_params=pool_params, concat_params=concat_params,
                 grid_side=config.grid_side, config=config)


def encode_instance(enc: EncoderParams, x: np.ndarray) -> np.ndarray:
    if enc.kind == "identity":
        return x
    return np.tanh(enc.W @ x + enc.b)


def encode_bag(enc: EncoderParams, bag: Bag) -> Bag:
    if enc.kind == "identity":
        return bag
    insts = tuple(InstanceEmbedding(encode_instance(enc, i.values))
                  for i in bag.instances)
    return Bag(id=bag.id, instances=insts, label=bag.label, meta=bag.meta)


def _grid_bag(bag: Bag) -> Bag:
    """Bags without a 2-D layout are tiled as (1, M) blocks."""
    if bag.instance_shape is not None:
        return bag
    insts = tuple(InstanceEmbedding(i.values, shape=(1, i.values.size))
                  for i in bag.instances)
    return Bag(id=bag.id, instances=insts, label=bag.label, meta=bag.meta)


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray
    pooled: PooledOutput | None
    fused: np.ndarray
    encoded: Bag


def forward(model: Model, bag: Bag) -> ForwardResult:
    """Run encoder, fusion and head; the pooled output is retained for
    interpretability (instance weights) where the strategy defines one."""
    enc_bag = encode_bag(model.encoder, bag)
    pooled = None
    if model.strategy in POOLING_KINDS:
        pooled = pool(model.pool_params, enc_bag)
        fused = pooled.E
    elif model.strategy == "single":
        pooled = baselines.single_first(enc_bag)
        fused = pooled.E
    elif model.strategy == "grid":
        grid = baselines.grid_concat(_grid_bag(enc_bag), min_side=model.grid_side)
        fused = grid.values
    else:
        fused = baselines.concat_project(model.concat_params, enc_bag)
    if fused.shape[0] != model.fused_dim():
        raise ShapeError(
            f"fused embedding has dim {fused.shape[0]} but head expects "
            f"{model.fused_dim()} (bag {bag.id!r} too large for this model?)"
        )
    logits = model.head.W @ fused + model.head.b
    return ForwardResult(logits=logits, pooled=pooled, fused=fused, encoded=enc_bag)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


@dataclass
class ModelGrads:
    """Gradient blocks mirroring the model; frozen or absent blocks are None."""

    encoder_W: np.ndarray | None = None
    encoder_b: np.ndarray | None = None
    pool_w: np.ndarray | None = None
    pool_Z: np.ndarray | None = None
    pool_G: np.ndarray | None = None
    concat_W1: np.ndarray | None = None
    concat_W2: np.ndarray | None = None
    head_W: np.ndarray | None = None
    head_b: np.ndarray | None = None

    def blocks(self):
        return {name: getattr(self, name) for name in (
            "encoder_W", "encoder_b", "pool_w", "pool_Z", "pool_G",
            "concat_W1", "concat_W2", "head_W", "head_b")}


def _zero_grads(model: Model) -> ModelGrads:
    g = ModelGrads()
    if model.encoder.kind == "mlp1" and not model.encoder.frozen:
        g.encoder_W = np.zeros_like(model.encoder.W)
        g.encoder_b = np.zeros_like(model.encoder.b)
    if model.pool_params is not None and model.pool_params.kind in ATTENTION_KINDS:
        g.pool_w = np.zeros_like(model.pool_params.w)
        g.pool_Z = np.zeros_like(model.pool_params.Z)
        if model.pool_params.G is not None:
            g.pool_G = np.zeros_like(model.pool_params.G)
    if model.concat_params is not None:
        g.concat_W1 = np.zeros_like(model.concat_params.W1)
        g.concat_W2 = np.zeros_like(model.concat_params.W2)
    if not model.head.frozen:
        g.head_W = np.zeros_like(model.head.W)
        g.head_b = np.zeros_like(model.head.b)
    return g


def _fusion_backward(model: Model, enc_bag: Bag, d_fused: np.ndarray,
                     grads: ModelGrads) -> np.ndarray:
    """Backprop through the fusion stage; returns d(encoded instances) (N, M)."""
    if model.strategy in POOLING_KINDS:
        pg = pool_backward(model.pool_params, enc_bag, d_fused)
        if grads.pool_w is not None:
            grads.pool_w += pg.d_w
            grads.pool_Z += pg.d_Z
            if pg.d_G is not None:
                grads.pool_G += pg.d_G
        return pg.d_instances
    if model.strategy == "single":
        d_inst = np.zeros((enc_bag.size, enc_bag.dim))
        d_inst[0] = d_fused
        return d_inst
    if model.strategy == "grid":
        return baselines.grid_concat_backward(_grid_bag(enc_bag), d_fused,
                                              min_side=model.grid_side)
    d_w1, d_w2, d_inst = baselines.concat_project_backward(
        model.concat_params, enc_bag, d_fused)
    grads.concat_W1 += d_w1
    grads.concat_W2 += d_w2
    return d_inst


def _bag_backward(model: Model, bag: Bag, result: ForwardResult,
                  grads: ModelGrads) -> float:
    if bag.label is None:
        raise DataError(f"bag {bag.id!r} has no label")
    label = int(bag.label)
    if not 0 <= label < model.head.n_classes:
        raise DataError(
            f"bag {bag.id!r} label {label} outside [0, {model.head.n_classes})"
        )
    logp = _log_softmax(result.logits)
    loss = -float(logp[label])
    d_logits = np.exp(logp)
    d_logits[label] -= 1.0

    if grads.head_W is not None:
        grads.head_W += np.outer(d_logits, result.fused)
        grads.head_b += d_logits
    d_fused = model.head.W.T @ d_logits

    d_inst = _fusion_backward(model, result.encoded, d_fused, grads)

    if grads.encoder_W is not None:
        for i, inst in enumerate(bag.instances):
            e = result.encoded.instances[i].values
            d_pre = d_inst[i] * (1.0 - e**2)
            grads.encoder_W += np.outer(d_pre, inst.values)
            grads.encoder_b += d_pre
    return loss


def _batch_stats(model: Model, bags) -> tuple[float, ModelGrads, int]:
    bags = list(bags)
    if not bags:
        raise DataError("empty batch")
    grads = _zero_grads(model)
    total_loss = 0.0
    correct = 0
    for bag in bags:
        result = forward(model, bag)
        total_loss += _bag_backward(model, bag, result, grads)
        if int(np.argmax(result.logits)) == int(bag.label):
            correct += 1
    scale = 1.0 / len(bags)
    for name, arr in grads.blocks().items():
        if arr is not None:
            setattr(grads, name, arr * scale)
    return total_loss * scale, grads, correct


def loss_and_grads(model: Model, bags) -> tuple[float, ModelGrads]:
    """Mean cross-entropy over a batch plus gradients for unfrozen blocks."""
    loss, grads, _ = _batch_stats(model, bags)
    return loss, grads


def _trainable_arrays(model: Model, grads: ModelGrads):
    pairs = []
    if grads.encoder_W is not None:
        pairs += [(model.encoder, "W", grads.encoder_W), (model.encoder, "b", grads.encoder_b)]
    if grads.pool_w is not None:
        pairs += [(model.pool_params, "w", grads.pool_w), (model.pool_params, "Z", grads.pool_Z)]
        if grads.pool_G is not None:
            pairs.append((model.pool_params, "G", grads.pool_G))
    if grads.concat_W1 is not None:
        pairs += [(model.concat_params, "W1", grads.concat_W1),
                  (model.concat_params, "W2", grads.concat_W2)]
    if grads.head_W is not None:
        pairs += [(model.head, "W", grads.head_W), (model.head, "b", grads.head_b)]
    return pairs


class _Adam:
    """Standard Adam, keyed by parameter block name; deterministic."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, pairs):
        self.t += 1
        for owner, attr, grad in pairs:
            key = f"{type(owner).__name__}.{attr}"
            m = self.m.setdefault(key, np.zeros_like(grad))
            v = self.v.setdefault(key, np.zeros_like(grad))
            m += (1 - self.beta1) * (grad - m)
            v += (1 - self.beta2) * (grad**2 - v)
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            arr = getattr(owner, attr)
            arr -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def resolve_grid_side(config: TrainConfig, bags) -> TrainConfig:
    """Fix the grid side from the largest bag so all grids share one dim."""
    if config.strategy != "grid" or config.grid_side is not None:
        return config
    max_n = max(bag.size for bag in bags)
    side = math.isqrt(max_n)
    if side * side < max_n:
        side += 1
    return replace(config, grid_side=side)


def train(config: TrainConfig, bags) -> tuple[Model, list[dict]]:
    """SGD (or Adam) over bag batches; deterministic given config + data.

    Returns the trained model and one history record per epoch with the
    running training loss and accuracy.
    """
    bags = list(bags)
    if not bags:
        raise DataError("training requires a nonempty dataset")
    config = resolve_grid_side(config, bags)
    rng = make_rng(config.seed)
    model = build_model(config, rng)
    adam = _Adam(config.learning_rate) if config.optimizer == "adam" else None

    history: list[dict] = []
    n = len(bags)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, config.batch_size):
            batch = [bags[i] for i in order[start:start + config.batch_size]]
            loss, grads, correct = _batch_stats(model, batch)
            epoch_loss += loss * len(batch)
            epoch_correct += correct
            pairs = _trainable_arrays(model, grads)
            if adam is not None:
                adam.step(pairs)
            else:
                for owner, attr, grad in pairs:
                    getattr(owner, attr)[...] -= config.learning_rate * grad
        history.append({
            "epoch": epoch,
            "loss": epoch_loss / n,
            "accuracy": epoch_correct / n,
        })
    return model, history


@dataclass(frozen=True)
class ParamReport:
    """Exact parameter counts per component, mirroring a complexity table."""

    strategy: str
    encoder_params: int
    fusion_params: int
    head_params: int
    total: int
    extra_over_baseline: int


def count_params(config: TrainConfig) -> ParamReport:
    """Closed-form counts from the shape formulas.

    The parameter-free strategies define the baseline; attention adds
    K*(M+1), gated attention K*(2M+1), and the concat projection its two
    layers.
    """
    encoder = 0 if config.encoder == "identity" else config.m * config.m_in + config.m
    if config.strategy == "attn":
        fusion = config.k * (config.m + 1)
    elif config.strategy == "gated":
        fusion = config.k * (2 * config.m + 1)
    elif config.strategy == "concat":
        fusion = config.hidden_dim * config.max_images * config.m \
            + config.m * config.hidden_dim
    else:
        fusion = 0
    head = config.c * fused_dim_for(config) + config.c
    total = encoder + fusion + head
    return ParamReport(
        strategy=config.strategy,
        encoder_params=encoder,
        fusion_params=fusion,
        head_params=head,
        total=total,
        extra_over_baseline=fusion,
    )


# --- checkpoint format -----------------------------------------------------
#
# magic "MIVM" | u32 version=1 | records until EOF, each:
#   u32 name_length | name bytes (UTF-8) | u32 rank | rank x u32 dims
#   | prod(dims) float64 values, little-endian
#
# The first record is always "meta.config": a rank-1 float64 vector holding
# [strategy_code, encoder_code, m_in, m, k, c, fused_dim, grid_side,
#  max_images, hidden_dim, freeze_encoder, freeze_head] with -1 for fields
# that do not apply.  Array records follow in a fixed order.

_STRATEGY_CODES = {name: i for i, name in enumerate(STRATEGIES)}
_ENCODER_CODES = {name: i for i, name in enumerate(ENCODER_KINDS)}


def _write_record(out: bytearray, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    encoded = name.encode("utf-8")
    out += struct.pack("<I", len(encoded))
    out += encoded
    out += struct.pack("<I", data.ndim)
    out += struct.pack(f"<{data.ndim}I", *data.shape)
    out += data.astype("<f8").tobytes()


def _instance_dims(model: Model) -> tuple[int, int]:
    """(m_in, m) recovered from the parameter shapes themselves."""
    if model.encoder.kind == "mlp1":
        return int(model.encoder.W.shape[1]), int(model.encoder.W.shape[0])
    if model.pool_params is not None and model.pool_params.dim is not None:
        m = model.pool_params.dim
    elif model.concat_params is not None:
        m = model.concat_params.dim
    elif model.grid_side is not None:
        m = model.fused_dim() // model.grid_side**2
    else:
        m = model.fused_dim()
    return int(m), int(m)


def _meta_vector(model: Model) -> np.ndarray:
    m_in, m = _instance_dims(model)
    k = model.pool_params.hidden_width \
        if model.pool_params is not None and model.pool_params.hidden_width > 0 else -1
    return np.array([
        _STRATEGY_CODES[model.strategy],
        _ENCODER_CODES[model.encoder.kind],
        m_in,
        m,
        k,
        model.head.n_classes,
        model.fused_dim(),
        -1 if model.grid_side is None else model.grid_side,
        -1 if model.concat_params is None else model.concat_params.max_images,
        -1 if model.concat_params is None else model.concat_params.hidden_dim,
        1 if model.encoder.frozen else 0,
        1 if model.head.frozen else 0,
    ], dtype=np.float64)


def save_model(model: Model, path) -> None:
    """Serialize to the single-file binary checkpoint format (bit-exact)."""
    out = bytearray()
    out += struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    _write_record(out, "meta.config", _meta_vector(model))
    if model.encoder.kind == "mlp1":
        _write_record(out, "encoder.W", model.encoder.W)
        _write_record(out, "encoder.b", model.encoder.b)
    if model.pool_params is not None and model.pool_params.w is not None:
        _write_record(out, "pool.w", model.pool_params.w)
        _write_record(out, "pool.Z", model.pool_params.Z)
        if model.pool_params.G is not None:
            _write_record(out, "pool.G", model.pool_params.G)
    if model.concat_params is not None:
        _write_record(out, "concat.W1", model.concat_params.W1)
        _write_record(out, "concat.W2", model.concat_params.W2)
    _write_record(out, "head.W", model.head.W)
    _write_record(out, "head.b", model.head.b)
    Path(path).write_bytes(bytes(out))


def _read_records(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint: expected magic {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    records: dict[str, np.ndarray] = {}
    offset = 8
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims))
        arr = np.frombuffer(raw, dtype="<f8", offset=offset, count=count)
        offset += count * 8
        records[name] = arr.reshape(dims).copy()
    return records


def load_model(path) -> Model:
    """Rebuild a model from a checkpoint; save -> load -> save is bit-exact."""
    records = _read_records(Path(path).read_bytes())
    if "meta.config" not in records:
        raise DataError("checkpoint is missing its meta.config record")
    meta = records["meta.config"]
    strategy = STRATEGIES[int(meta[0])]
    encoder_kind = ENCODER_KINDS[int(meta[1])]
    grid_side = None if meta[7] < 0 else int(meta[7])

    if encoder_kind == "mlp1":
        enc = EncoderParams(kind="mlp1", W=records["encoder.W"],
                            b=records["encoder.b"], frozen=bool(meta[10]))
    else:
        enc = EncoderParams(kind="identity", frozen=bool(meta[10]))

    pool_params = None
    concat_params = None
    if strategy in POOLING_KINDS:
        if strategy in ATTENTION_KINDS:
            pool_params = PoolingParams(
                kind=strategy, w=records["pool.w"], Z=records["pool.Z"],
                G=records.get("pool.G"))
        else:
            pool_params = PoolingParams.parameter_free(strategy)
    elif strategy == "concat":
        concat_params = baselines.ConcatProjParams(
            max_images=int(meta[8]), W1=records["concat.W1"],
            W2=records["concat.W2"])

    head = HeadParams(W=records["head.W"], b=records["head.b"],
                      frozen=bool(meta[11]))
    return Model(strategy=strategy, encoder=enc, head=head,
                 pool_params=pool_params, concat_params=concat_params,
                 grid_side=grid_side)
