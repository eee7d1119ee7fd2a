"""Permutation-invariant fusion of variable-size bags of embeddings.

A bag of N instance embeddings (each of dimension M) is reduced to one
fused embedding by average, max, attention, or gated-attention pooling —
with exact analytic gradients — plus simple fusion baselines, a
desk-scale training and benchmark harness, binary data formats, and a
CLI (``mivc``).
"""

from .baselines import (
    ConcatProjParams,
    GridSpec,
    concat_project,
    grid_concat,
    grid_spec_for,
    single_first,
)
from .data import (
    Dataset,
    DatasetManifest,
    DatasetRecord,
    SyntheticSpec,
    default_synthetic_spec,
    generate_synthetic,
    import_csv,
    load_bag,
    load_dataset,
    load_manifest,
    read_bag_file,
    write_bag_file,
    write_manifest,
)
from .errors import (
    BadMagicError,
    CountMismatchError,
    DataError,
    ManifestError,
    MivcError,
    NonFiniteError,
    ParseError,
    ShapeError,
    UsageError,
)
from .evaluate import (
    AttentionReport,
    MetricsReport,
    compute_metrics,
    evaluate_model,
    export_attention,
    run_benchmark,
)
from .gradcheck import model_gradcheck, run_pool_gradcheck
from .model import (
    Model,
    TrainConfig,
    build_model,
    count_params,
    forward,
    load_model,
    loss_and_grads,
    save_model,
    train,
)
from .pooling import (
    Bag,
    InstanceEmbedding,
    PooledOutput,
    PoolingParams,
    flatten,
    pool,
    pool_avg,
    pool_attention,
    pool_backward,
    pool_max,
    unflatten,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionReport",
    "Bag",
    "BadMagicError",
    "ConcatProjParams",
    "CountMismatchError",
    "DataError",
    "Dataset",
    "DatasetManifest",
    "DatasetRecord",
    "GridSpec",
    "InstanceEmbedding",
    "ManifestError",
    "MetricsReport",
    "MivcError",
    "Model",
    "NonFiniteError",
    "ParseError",
    "PooledOutput",
    "PoolingParams",
    "ShapeError",
    "SyntheticSpec",
    "TrainConfig",
    "UsageError",
    "build_model",
    "compute_metrics",
    "concat_project",
    "count_params",
    "default_synthetic_spec",
    "evaluate_model",
    "export_attention",
    "flatten",
    "forward",
    "generate_synthetic",
    "grid_concat",
    "grid_spec_for",
    "import_csv",
    "load_bag",
    "load_dataset",
    "load_manifest",
    "load_model",
    "loss_and_grads",
    "model_gradcheck",
    "pool",
    "pool_attention",
    "pool_avg",
    "pool_backward",
    "pool_max",
    "read_bag_file",
    "run_benchmark",
    "run_pool_gradcheck",
    "save_model",
    "single_first",
    "train",
    "unflatten",
    "write_bag_file",
    "write_manifest",
]
