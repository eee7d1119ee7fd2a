"""Bag dataset ingestion and generation.

Two on-disk formats, both little-endian:

Embedding file (one bag)::

    magic "MIVC" | u32 version=1 | u32 N | u32 rank in {1,2}
    | rank x u32 dims | N*M float32 values, row-major

For rank 1 the single dim is M; for rank 2 the dims are the per-instance
(patches, dims) layout with M = patches * dims.  Values are stored as
float32 and widened to float64 on load.

Manifest (one dataset split): JSON lines.  The first line is a header
``{"class_names": [...]}``; every following line is one record
``{"bag_id", "label", "path", "n_instances", "shape", "witness_indices"}``
where ``path`` is relative to the manifest's directory and the last two
fields are optional.

The synthetic generator builds classic witness-style bags: a bag of class
c contains at least one instance drawn near ``class_centers[c]`` and the
remaining instances come from a class-independent distractor cloud, so
only an aggregator that finds the witnesses can classify reliably.
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    DataError,
    ManifestError,
    NonFiniteError,
    ParseError,
)
from .numkern import make_rng
from .pooling import Bag, InstanceEmbedding

MAGIC = b"MIVC"
FORMAT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> Path:
    """Write via a sibling temp file + rename so interrupts never leave a
    half-written file behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_bag_file(path, values, shape: tuple[int, int] | None = None) -> None:
    """Write an (N, M) array of instance embeddings as float32."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"bag payload must be a nonempty (N, M) array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to write non-finite embeddings")
    n, m = arr.shape
    if shape is None:
        rank, dims = 1, (m,)
    else:
        p, d = int(shape[0]), int(shape[1])
        if p * d != m:
            raise DataError(f"shape ({p}, {d}) incompatible with M={m}")
        rank, dims = 2, (p, d)
    header = struct.pack("<4sIII", MAGIC, FORMAT_VERSION, n, rank)
    header += struct.pack(f"<{rank}I", *dims)
    atomic_write_bytes(path, header + arr.astype("<f4").tobytes())


def read_bag_file(path):
    """Read an embedding file; returns (values (N, M) float64, shape|None)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, got {raw[:4]!r}")
    version, n, rank = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    if rank not in (1, 2):
        raise DataError(f"{path}: rank must be 1 or 2, got {rank}")
    dims = struct.unpack_from(f"<{rank}I", raw, 16)
    if any(d < 1 for d in dims) or n < 1:
        raise DataError(f"{path}: nonpositive header dims {dims} or count {n}")
    m = int(np.prod(dims))
    offset = 16 + 4 * rank
    expected = n * m * 4
    if len(raw) - offset != expected:
        raise CountMismatchError(
            f"{path}: header promises {n} instances of {m} floats "
            f"({expected} bytes) but file holds {len(raw) - offset}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    shape = (int(dims[0]), int(dims[1])) if rank == 2 else None
    return values.reshape(n, m), shape


@dataclass(frozen=True)
class DatasetRecord:
    bag_id: str
    label: int
    path: str
    n_instances: int
    shape: tuple[int, int] | None = None
    witness_indices: tuple[int, ...] | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[DatasetRecord, ...]
    class_names: tuple[str, ...]
    root: Path

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def write_manifest(path, class_names, records) -> None:
    lines = [json.dumps({"class_names": list(class_names)})]
    for rec in records:
        row = {
            "bag_id": rec.bag_id,
            "label": rec.label,
            "path": rec.path,
            "n_instances": rec.n_instances,
        }
        if rec.shape is not None:
            row["shape"] = list(rec.shape)
        if rec.witness_indices is not None:
            row["witness_indices"] = list(rec.witness_indices)
        lines.append(json.dumps(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: manifest is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: header line is not valid JSON: {exc}") from exc
    names = header.get("class_names")
    if not isinstance(names, list) or not names:
        raise ManifestError(f"{path}: header must carry a nonempty class_names list")

    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            rec = DatasetRecord(
                bag_id=str(row["bag_id"]),
                label=int(row["label"]),
                path=str(row["path"]),
                n_instances=int(row["n_instances"]),
                shape=tuple(row["shape"]) if row.get("shape") else None,
                witness_indices=tuple(int(i) for i in row["witness_indices"])
                if row.get("witness_indices") is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
        if rec.bag_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate bag_id {rec.bag_id!r}")
        seen.add(rec.bag_id)
        if not 0 <= rec.label < len(names):
            raise ManifestError(
                f"{path}:{lineno}: label {rec.label} outside [0, {len(names)})"
            )
        if rec.n_instances < 1:
            raise ManifestError(f"{path}:{lineno}: n_instances must be >= 1")
        records.append(rec)
    return DatasetManifest(records=tuple(records), class_names=tuple(names),
                           root=path.parent)


def load_bag(record: DatasetRecord, root) -> Bag:
    """Load one record's embedding file and cross-check it against the record."""
    values, shape = read_bag_file(Path(root) / record.path)
    if values.shape[0] != record.n_instances:
        raise CountMismatchError(
            f"{record.bag_id}: manifest says {record.n_instances} instances "
            f"but {record.path} holds {values.shape[0]}"
        )
    if record.shape is not None and shape != tuple(record.shape):
        raise CountMismatchError(
            f"{record.bag_id}: manifest shape {record.shape} vs file shape {shape}"
        )
    meta = None
    if record.witness_indices is not None:
        meta = {"witness_indices": ",".join(str(i) for i in record.witness_indices)}
    return Bag.from_array(record.bag_id, values, label=record.label,
                          shape=shape, meta=meta)


@dataclass(frozen=True)
class Dataset:
    bags: tuple[Bag, ...]
    class_names: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def load_dataset(manifest_path) -> Dataset:
    manifest = load_manifest(manifest_path)
    bags = tuple(load_bag(rec, manifest.root) for rec in manifest.records)
    return Dataset(bags=bags, class_names=manifest.class_names)


def witness_indices(bag: Bag) -> tuple[int, ...] | None:
    """Recover the generator's witness positions from bag metadata."""
    if bag.meta is None or "witness_indices" not in bag.meta:
        return None
    text = bag.meta["witness_indices"]
    return tuple(int(tok) for tok in text.split(",")) if text else ()


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a witness-style bag dataset; a pure function of its fields."""

    n_bags: int
    n_range: tuple[int, int]
    dim: int
    class_centers: np.ndarray  # (C, dim)
    witness_rate: float
    noise_sigma: float
    seed: int
    distractor_sigma: float = 1.0
    train_fraction: float = 0.8

    def __post_init__(self):
        centers = np.asarray(self.class_centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 2 or centers.shape[1] != self.dim:
            raise DataError(
                f"class_centers must be (C >= 2, {self.dim}), got {centers.shape}"
            )
        object.__setattr__(self, "class_centers", centers)
        lo, hi = self.n_range
        if not (1 <= lo <= hi):
            raise DataError(f"invalid n_range {self.n_range}")
        if hi > 21:
            warnings.warn(
                f"n_range max {hi} exceeds the usual 2..21 bag-size range",
                stacklevel=2,
            )
        if not 0.0 < self.witness_rate <= 1.0:
            raise DataError("witness_rate must lie in (0, 1]")
        if self.noise_sigma <= 0 or self.distractor_sigma <= 0:
            raise DataError("sigmas must be positive")
        if self.n_bags < self.n_classes:
            raise DataError("need at least one bag per class")
        dists = np.linalg.norm(
            centers[:, None, :] - centers[None, :, :], axis=-1)
        if np.any(dists[np.triu_indices(len(centers), k=1)] < 1e-9):
            warnings.warn("some class centers coincide; classes will be "
                          "indistinguishable", stacklevel=2)

    @property
    def n_classes(self) -> int:
        return int(self.class_centers.shape[0])


def spread_centers(n_classes: int, dim: int, scale: float, seed: int) -> np.ndarray:
    """Deterministic class centers: random directions scaled to a fixed norm."""
    rng = make_rng(seed)
    raw = rng.standard_normal((n_classes, dim))
    return scale * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def default_synthetic_spec() -> SyntheticSpec:
    """The bundled desk-scale task used by the benchmark and the CLI preset."""
    return SyntheticSpec(
        n_bags=2400,
        n_range=(2, 10),
        dim=16,
        class_centers=spread_centers(3, 16, scale=3.0, seed=101),
        witness_rate=0.25,
        noise_sigma=0.5,
        distractor_sigma=1.0,
        seed=7,
    )


def generate_synthetic(spec: SyntheticSpec, out_dir):
    """Write bag files plus train/eval manifests; returns their two paths.

    Bags are assigned classes round-robin so per-class counts differ by at
    most one, and each class is split train/eval in the configured ratio.
    Every bag carries at least one witness instance; remaining instances
    are witnesses independently with probability ``witness_rate`` and
    distractors otherwise.
    """
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    rng = make_rng(spec.seed)
    lo, hi = spec.n_range

    records = []
    for i in range(spec.n_bags):
        label = i % spec.n_classes
        n = int(rng.integers(lo, hi + 1))
        witness_mask = rng.random(n) < spec.witness_rate
        if not witness_mask.any():
            witness_mask[int(rng.integers(n))] = True
        center = spec.class_centers[label]
        values = np.empty((n, spec.dim))
        for j in range(n):
            if witness_mask[j]:
                values[j] = center + spec.noise_sigma * rng.standard_normal(spec.dim)
            else:
                values[j] = spec.distractor_sigma * rng.standard_normal(spec.dim)
        bag_id = f"bag-{i:05d}"
        rel = f"bags/{bag_id}.mivc"
        write_bag_file(out / rel, values)
        records.append(DatasetRecord(
            bag_id=bag_id, label=label, path=rel, n_instances=n,
            witness_indices=tuple(int(j) for j in np.flatnonzero(witness_mask)),
        ))

    class_names = tuple(f"class-{c}" for c in range(spec.n_classes))
    train_recs, eval_recs = [], []
    for c in range(spec.n_classes):
        of_class = [r for r in records if r.label == c]
        cut = int(round(spec.train_fraction * len(of_class)))
        train_recs.extend(of_class[:cut])
        eval_recs.extend(of_class[cut:])

    train_path = out / "train.jsonl"
    eval_path = out / "eval.jsonl"
    write_manifest(train_path, class_names, train_recs)
    write_manifest(eval_path, class_names, eval_recs)
    return train_path, eval_path


def import_csv(path, delimiter: str = ",") -> Bag:
    """Read one bag from delimited text, one instance per row."""
    path = Path(path)
    rows: list[list[float]] = []
    width: int | None = None
    with path.open() as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(delimiter)
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ParseError(
                    f"{path}: ragged row at line {lineno}: expected {width} "
                    f"columns, got {len(cells)}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise ParseError(f"{path}: non-numeric cell at line {lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{path}: contains NaN or Inf")
    return Bag.from_array(path.stem, values)
