"""Evaluation: classification metrics, the strategy benchmark, and
interpretability exports of per-instance attention weights.

Metric conventions: a class with no true examples contributes recall 0,
and a class never predicted contributes precision 0 — degenerate runs are
penalized rather than skipped, so macro scores stay comparable across
strategies.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, UsageError
from .model import Model, TrainConfig, forward, resolve_grid_side, train
from .pooling import ATTENTION_KINDS

TABLE_COLUMNS = ("strategy", "accuracy", "macro_precision", "macro_recall")


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    support: int
    predicted: int
    true_positives: int
    precision: float
    recall: float


@dataclass(frozen=True)
class MetricsReport:
    n_examples: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    per_class: tuple[ClassMetrics, ...]

    def row(self, strategy: str) -> dict:
        return {
            "strategy": strategy,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
        }


def compute_metrics(y_true, y_pred, n_classes: int) -> MetricsReport:
    """Accuracy plus macro-averaged precision/recall over ``n_classes``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise UsageError(
            f"label arrays disagree: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise DataError("metrics need at least one example")
    if n_classes < 1:
        raise UsageError("n_classes must be positive")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise DataError(
                f"{name} labels fall outside [0, {n_classes})")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    tp = np.diag(confusion)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)

    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)

    per_class = tuple(
        ClassMetrics(label=i, support=int(support[i]), predicted=int(predicted[i]),
                     true_positives=int(tp[i]), precision=float(precision[i]),
                     recall=float(recall[i]))
        for i in range(n_classes)
    )
    return MetricsReport(
        n_examples=int(y_true.size),
        accuracy=float(tp.sum() / y_true.size),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        per_class=per_class,
    )


def predict(model: Model, bags) -> np.ndarray:
    return np.array([int(np.argmax(forward(model, bag).logits)) for bag in bags],
                    dtype=np.int64)


def evaluate_model(model: Model, bags, n_classes: int) -> MetricsReport:
    bags = list(bags)
    y_true = np.array([bag.label for bag in bags], dtype=np.int64)
    return compute_metrics(y_true, predict(model, bags), n_classes)


BENCHMARK_STRATEGIES = ("single", "grid", "concat", "avg", "max", "attn", "gated")


@dataclass(frozen=True)
class BenchmarkRun:
    strategy: str
    metrics: MetricsReport
    model: Model
    history: tuple[dict, ...]


def run_benchmark(base_config: TrainConfig, train_bags, eval_bags,
                  strategies=BENCHMARK_STRATEGIES) -> list[BenchmarkRun]:
    """Train one model per strategy under identical conditions.

    Every run shares the base config (seed included) except for the
    strategy field, so the comparison isolates the fusion choice.
    """
    train_bags = list(train_bags)
    eval_bags = list(eval_bags)
    runs = []
    for strategy in strategies:
        if strategy not in BENCHMARK_STRATEGIES:
            raise UsageError(f"unknown benchmark strategy {strategy!r}")
        config = replace(base_config, strategy=strategy, grid_side=None)
        config = resolve_grid_side(config, train_bags + eval_bags)
        model, history = train(config, train_bags)
        metrics = evaluate_model(model, eval_bags, config.c)
        runs.append(BenchmarkRun(strategy=strategy, metrics=metrics,
                                 model=model, history=tuple(history)))
    return runs


def format_table(rows: list[dict], precision: int = 4) -> str:
    """Aligned text table with the fixed benchmark columns."""
    headers = TABLE_COLUMNS
    rendered = [
        [row["strategy"]] + [f"{float(row[c]):.{precision}f}" for c in headers[1:]]
        for row in rows
    ]
    widths = [max(len(h), *(len(r[i]) for r in rendered)) if rendered else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out += [line(r) for r in rendered]
    return "\n".join(out) + "\n"


def rows_to_jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in TABLE_COLUMNS})
    return buf.getvalue()


@dataclass(frozen=True)
class AttentionRecord:
    bag_id: str
    label: int | None
    predicted: int
    weights: tuple[float, ...]
    argmax_index: int


@dataclass(frozen=True)
class AttentionReport:
    kind: str
    records: tuple[AttentionRecord, ...]

    def to_jsonl(self, decimals: int = 4) -> str:
        lines = []
        for rec in self.records:
            lines.append(json.dumps({
                "bag_id": rec.bag_id,
                "label": rec.label,
                "predicted": rec.predicted,
                "weights": [round(w, decimals) for w in rec.weights],
                "argmax_index": rec.argmax_index,
            }, sort_keys=True) + "\n")
        return "".join(lines)


def export_attention(model: Model, bags) -> AttentionReport:
    """Per-bag instance weights for attention-style models.

    Weights are kept at full precision here; rendering rounds them.  The
    argmax index identifies the instance the model leaned on hardest.
    """
    if model.strategy not in ATTENTION_KINDS:
        raise UsageError(
            f"strategy {model.strategy!r} has no attention weights to export")
    records = []
    for bag in bags:
        result = forward(model, bag)
        alpha = result.pooled.alpha
        records.append(AttentionRecord(
            bag_id=bag.id,
            label=None if bag.label is None else int(bag.label),
            predicted=int(np.argmax(result.logits)),
            weights=tuple(float(a) for a in alpha),
            argmax_index=int(np.argmax(alpha)),
        ))
    return AttentionReport(kind=model.strategy, records=tuple(records))


def witness_hit_rate(report: AttentionReport, bags) -> float:
    """Fraction of bags whose top-weighted instance is a marked witness."""
    from .data import witness_indices

    by_id = {bag.id: bag for bag in bags}
    hits = 0
    total = 0
    for rec in report.records:
        bag = by_id.get(rec.bag_id)
        marked = witness_indices(bag) if bag is not None else None
        if not marked:
            continue
        total += 1
        if rec.argmax_index in marked:
            hits += 1
    if total == 0:
        raise DataError("no bags carry witness annotations")
    return hits / total
