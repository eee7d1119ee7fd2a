"""Command-line surface.

Subcommands: gen (synthetic data), pool (one bag), gradcheck (gradient
verification gate), train, eval, bench (strategy comparison), params
(parameter accounting).

Conventions shared by every command:

* exit codes - 0 success, 1 check failure, 2 usage error, 3 data error;
* errors are one JSON line on stderr: {"error", "message", "code"};
* options may come from a JSON config file (--config), with explicit
  flags winning over file values and unknown file keys rejected;
* every run that writes artifacts also writes the fully-resolved config
  snapshot next to them, and all file writes are atomic (temp + rename);
* all randomness descends from a single --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as data_mod
from . import evaluate as eval_mod
from . import plots
from .errors import DataError, MivcError, ShapeError, UsageError
from .gradcheck import TOLERANCE, run_pool_gradcheck
from .model import (
    STRATEGIES,
    TrainConfig,
    count_params,
    load_model,
    resolve_grid_side,
    save_model,
    train,
)
from .pooling import ATTENTION_KINDS, POOLING_KINDS, Bag, PoolingParams, pool
from .numkern import make_rng

PROG = "mivc"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as one-line JSON on stderr."""

    def error(self, message):
        _print_error(2, "usage", message)
        raise SystemExit(2)


def _print_error(code: int, kind: str, message) -> None:
    line = json.dumps({"error": kind, "message": str(message), "code": code})
    print(line, file=sys.stderr)


def _atomic_json(path, payload) -> Path:
    return data_mod.atomic_write_text(
        path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    _atomic_json(out_dir / "config.snapshot.json",
                 {"command": command, "options": resolved})


def _load_config_file(path, allowed: set[str]) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise UsageError(
            f"config file {path} has unknown keys: {', '.join(unknown)}")
    return doc


def _merge(args: argparse.Namespace, keys: dict[str, object]) -> dict:
    """Resolve option values: explicit flag > config file > default."""
    config = {}
    if getattr(args, "config", None):
        config = _load_config_file(args.config, set(keys))
    resolved = {}
    for key, default in keys.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in config:
            resolved[key] = config[key]
        else:
            resolved[key] = default
    return resolved


def _require(resolved: dict, *names: str) -> None:
    missing = [n for n in names if resolved[n] is None]
    if missing:
        raise UsageError(f"missing required option(s): "
                         + ", ".join(f"--{n.replace('_', '-')}" for n in missing))


# --- gen ---------------------------------------------------------------------

_GEN_KEYS = dict(out=None, bags=2400, classes=3, dim=16, min_instances=2,
                 max_instances=10, witness_rate=0.25, noise_sigma=0.5,
                 distractor_sigma=1.0, center_scale=3.0, center_seed=101,
                 train_fraction=0.8, seed=7)


def _cmd_gen(args) -> int:
    resolved = _merge(args, _GEN_KEYS)
    _require(resolved, "out")
    spec = data_mod.SyntheticSpec(
        n_bags=int(resolved["bags"]),
        n_range=(int(resolved["min_instances"]), int(resolved["max_instances"])),
        dim=int(resolved["dim"]),
        class_centers=data_mod.spread_centers(
            int(resolved["classes"]), int(resolved["dim"]),
            scale=float(resolved["center_scale"]),
            seed=int(resolved["center_seed"])),
        witness_rate=float(resolved["witness_rate"]),
        noise_sigma=float(resolved["noise_sigma"]),
        distractor_sigma=float(resolved["distractor_sigma"]),
        train_fraction=float(resolved["train_fraction"]),
        seed=int(resolved["seed"]),
    )
    out = Path(resolved["out"])
    train_path, eval_path = data_mod.generate_synthetic(spec, out)
    _snapshot(out, "gen", resolved)
    print(json.dumps({
        "train_manifest": str(train_path),
        "eval_manifest": str(eval_path),
        "bags": spec.n_bags,
        "classes": spec.n_classes,
    }))
    return 0


# --- pool --------------------------------------------------------------------

def _read_input_bag(path) -> Bag:
    """Accept either the binary embedding format (sniffed by magic) or CSV."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"input file {p} does not exist")
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == data_mod.MAGIC:
        values, shape = data_mod.read_bag_file(p)
        return Bag.from_array(p.stem, values, shape=shape)
    return data_mod.import_csv(p)


def _cmd_pool(args) -> int:
    keys = dict(input=None, kind=None, params=None, random_init=False,
                seed=0, hidden_width=64, out=None)
    resolved = _merge(args, keys)
    _require(resolved, "input", "kind")
    kind = resolved["kind"]
    if kind not in POOLING_KINDS:
        raise UsageError(f"--kind must be one of {', '.join(POOLING_KINDS)}")
    bag = _read_input_bag(resolved["input"])

    if kind in ATTENTION_KINDS:
        if resolved["params"]:
            model = load_model(resolved["params"])
            if model.pool_params is None or model.pool_params.kind != kind:
                raise UsageError(
                    f"checkpoint {resolved['params']} holds no {kind} pooling "
                    "parameters")
            params = model.pool_params
        elif resolved["random_init"]:
            params = PoolingParams.random(
                kind, int(resolved["hidden_width"]), bag.dim,
                make_rng(int(resolved["seed"])))
        else:
            raise UsageError(
                f"{kind} pooling needs --params <checkpoint> or --random-init")
    else:
        params = PoolingParams.parameter_free(kind)

    result = pool(params, bag)
    payload = {
        "kind": kind,
        "n_instances": bag.size,
        "E": [float(x) for x in result.E],
        "alpha": None if result.alpha is None
        else [float(a) for a in result.alpha],
    }
    text = json.dumps(payload, sort_keys=True) + "\n"
    if resolved["out"]:
        data_mod.atomic_write_text(resolved["out"], text)
    else:
        sys.stdout.write(text)
    return 0


# --- gradcheck -----------------------------------------------------------------

def _cmd_gradcheck(args) -> int:
    keys = dict(kind="all", trials=100, seed=7, corrupt=False)
    resolved = _merge(args, keys)
    if int(resolved["trials"]) < 1:
        raise UsageError("--trials must be >= 1")
    kinds = ATTENTION_KINDS if resolved["kind"] == "all" else (resolved["kind"],)
    for kind in kinds:
        if kind not in ATTENTION_KINDS:
            raise UsageError(
                f"--kind must be one of {', '.join(ATTENTION_KINDS)} or all")

    all_pass = True
    for kind in kinds:
        result = run_pool_gradcheck(kind, int(resolved["trials"]),
                                    int(resolved["seed"]),
                                    corrupt=bool(resolved["corrupt"]))
        for group, err in sorted(result.max_errors.items()):
            print(f"{kind:6s} {group:10s} max_rel_err={err:.3e}")
        all_pass = all_pass and result.passed
    print(f"gradcheck {'PASS' if all_pass else 'FAIL'} "
          f"(tolerance {TOLERANCE:.0e})")
    return 0 if all_pass else 1


# --- params --------------------------------------------------------------------

def _cmd_params(args) -> int:
    keys = dict(kind=None, hidden_width=None, dim=None, classes=2,
                encoder="identity", input_dim=None, hidden_dim=64,
                max_images=6, grid_side=None)
    resolved = _merge(args, keys)
    _require(resolved, "kind", "hidden_width", "dim")
    if resolved["kind"] not in STRATEGIES:
        raise UsageError(f"--kind must be one of {', '.join(STRATEGIES)}")
    m = int(resolved["dim"])
    m_in = int(resolved["input_dim"]) if resolved["input_dim"] is not None else m
    config = TrainConfig(
        strategy=resolved["kind"],
        m_in=m_in,
        m=m,
        k=int(resolved["hidden_width"]),
        c=int(resolved["classes"]),
        encoder=resolved["encoder"],
        hidden_dim=int(resolved["hidden_dim"]),
        max_images=int(resolved["max_images"]),
        grid_side=None if resolved["grid_side"] is None
        else int(resolved["grid_side"]),
    )
    report = count_params(config)
    payload = asdict(report)
    payload["extra"] = report.extra_over_baseline
    print(json.dumps(payload, sort_keys=True))
    return 0


# --- train ---------------------------------------------------------------------

_TRAIN_KEYS = dict(train=None, eval=None, out=None, strategy="attn",
                   encoder="identity", encoded_dim=None, hidden_width=64,
                   learning_rate=0.1, epochs=30, batch_size=16, seed=0,
                   optimizer="sgd", max_images=6, hidden_dim=64,
                   freeze_encoder=True, freeze_head=False)


def _dataset_dims(dataset: data_mod.Dataset) -> int:
    dims = {bag.dim for bag in dataset.bags}
    if len(dims) != 1:
        raise DataError(f"bags disagree on embedding dim: {sorted(dims)}")
    return dims.pop()


def _train_config_from(resolved: dict, dataset: data_mod.Dataset) -> TrainConfig:
    m_in = _dataset_dims(dataset)
    encoder = resolved["encoder"]
    m = int(resolved["encoded_dim"]) if resolved["encoded_dim"] is not None \
        else m_in
    if encoder == "identity" and m != m_in:
        raise UsageError("--encoded-dim requires --encoder mlp1")
    return TrainConfig(
        strategy=resolved["strategy"],
        m_in=m_in,
        m=m,
        k=int(resolved["hidden_width"]),
        c=dataset.n_classes,
        encoder=encoder,
        learning_rate=float(resolved["learning_rate"]),
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        seed=int(resolved["seed"]),
        freeze_encoder=bool(resolved["freeze_encoder"]),
        freeze_head=bool(resolved["freeze_head"]),
        optimizer=resolved["optimizer"],
        max_images=int(resolved["max_images"]),
        hidden_dim=int(resolved["hidden_dim"]),
    )


def _save_checkpoint(model, path) -> None:
    tmp = Path(path).with_name(Path(path).name + f".tmp-{os.getpid()}")
    save_model(model, tmp)
    os.replace(tmp, path)


def _cmd_train(args) -> int:
    resolved = _merge(args, _TRAIN_KEYS)
    _require(resolved, "train", "out")
    dataset = data_mod.load_dataset(resolved["train"])
    config = _train_config_from(resolved, dataset)
    config = resolve_grid_side(config, dataset.bags)
    model, history = train(config, dataset.bags)

    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    _save_checkpoint(model, out / "model.mivm")
    _atomic_json(out / "history.json", list(history))
    plots.save_training_curves(list(history), out / "training.png",
                               title=f"{config.strategy} training")

    summary = {
        "checkpoint": str(out / "model.mivm"),
        "final_loss": history[-1]["loss"],
        "final_train_accuracy": history[-1]["accuracy"],
        "epochs": config.epochs,
        "strategy": config.strategy,
    }
    if resolved["eval"]:
        eval_ds = data_mod.load_dataset(resolved["eval"])
        metrics = eval_mod.evaluate_model(model, eval_ds.bags, config.c)
        _atomic_json(out / "metrics.json", _metrics_payload(metrics))
        summary["eval_accuracy"] = metrics.accuracy
    _snapshot(out, "train", resolved)
    print(json.dumps(summary, sort_keys=True))
    return 0


# --- eval ----------------------------------------------------------------------

def _metrics_payload(metrics: eval_mod.MetricsReport) -> dict:
    return {
        "n_examples": metrics.n_examples,
        "accuracy": metrics.accuracy,
        "macro_precision": metrics.macro_precision,
        "macro_recall": metrics.macro_recall,
        "per_class": [asdict(c) for c in metrics.per_class],
    }


def _cmd_eval(args) -> int:
    keys = dict(model=None, data=None, out=None, attention_sample=24)
    resolved = _merge(args, keys)
    _require(resolved, "model", "data")
    model = load_model(resolved["model"])
    dataset = data_mod.load_dataset(resolved["data"])
    if dataset.n_classes > model.head.n_classes:
        raise DataError(
            f"dataset has {dataset.n_classes} classes but the model only "
            f"scores {model.head.n_classes}")
    metrics = eval_mod.evaluate_model(model, dataset.bags,
                                      model.head.n_classes)
    payload = _metrics_payload(metrics)
    print(json.dumps({k: payload[k] for k in
                      ("n_examples", "accuracy", "macro_precision",
                       "macro_recall")}, sort_keys=True))

    if resolved["out"]:
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        _atomic_json(out / "metrics.json", payload)
        if model.strategy in ATTENTION_KINDS:
            report = eval_mod.export_attention(model, dataset.bags)
            data_mod.atomic_write_text(out / "attention.jsonl",
                                       report.to_jsonl())
            plots.save_attention_heatmap(
                report.records, out / "attention.png",
                max_bags=int(resolved["attention_sample"]))
        _snapshot(out, "eval", resolved)
    return 0


# --- bench ---------------------------------------------------------------------

_BENCH_KEYS = dict(train=None, eval=None, out=None, preset=None,
                   strategies=",".join(eval_mod.BENCHMARK_STRATEGIES),
                   hidden_width=64, learning_rate=0.1, epochs=12,
                   batch_size=16, seed=0, optimizer="sgd", max_images=6,
                   hidden_dim=64)


def _cmd_bench(args) -> int:
    resolved = _merge(args, _BENCH_KEYS)
    _require(resolved, "out")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)

    if resolved["preset"]:
        if resolved["preset"] != "default":
            raise UsageError("the only bundled preset is 'default'")
        spec = data_mod.default_synthetic_spec()
        train_path, eval_path = data_mod.generate_synthetic(
            spec, out / "dataset")
    else:
        _require(resolved, "train", "eval")
        train_path, eval_path = resolved["train"], resolved["eval"]

    train_ds = data_mod.load_dataset(train_path)
    eval_ds = data_mod.load_dataset(eval_path)
    strategies = tuple(s.strip() for s in resolved["strategies"].split(",")
                       if s.strip())
    if not strategies:
        raise UsageError("--strategies must name at least one strategy")

    base = _train_config_from({**resolved, "strategy": strategies[0],
                               "encoder": "identity", "encoded_dim": None,
                               "freeze_encoder": True, "freeze_head": False},
                              train_ds)
    runs = eval_mod.run_benchmark(base, train_ds.bags, eval_ds.bags,
                                  strategies=strategies)

    rows = [run.metrics.row(run.strategy) for run in runs]
    table = eval_mod.format_table(rows)
    sys.stdout.write(table)
    data_mod.atomic_write_text(out / "benchmark.txt", table)
    data_mod.atomic_write_text(out / "benchmark.jsonl",
                               eval_mod.rows_to_jsonl(rows))
    data_mod.atomic_write_text(out / "benchmark.csv",
                               eval_mod.rows_to_csv(rows))
    plots.save_benchmark_bars(rows, out / "benchmark.png")
    for run in runs:
        _save_checkpoint(run.model, out / f"model-{run.strategy}.mivm")
    _snapshot(out, "bench", resolved)
    return 0


# --- parser wiring ---------------------------------------------------------------

def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="JSON",
                   help="JSON config file; explicit flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog=PROG,
        description="Permutation-invariant fusion of variable-size bags of "
                    "embeddings: pooling operators, baselines, and a "
                    "desk-scale training and benchmark harness.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic witness-bag dataset",
                       description="Write bag files plus train/eval manifests "
                                   "for the separable synthetic task.")
    _add_config_flag(p)
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--bags", type=int, help="total number of bags")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--min-instances", type=int, dest="min_instances",
                   help="smallest bag size")
    p.add_argument("--max-instances", type=int, dest="max_instances",
                   help="largest bag size")
    p.add_argument("--witness-rate", type=float, dest="witness_rate",
                   help="per-instance witness probability")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma",
                   help="witness noise scale")
    p.add_argument("--distractor-sigma", type=float, dest="distractor_sigma",
                   help="distractor scale")
    p.add_argument("--center-scale", type=float, dest="center_scale",
                   help="class center norm")
    p.add_argument("--center-seed", type=int, dest="center_seed",
                   help="seed for class centers")
    p.add_argument("--train-fraction", type=float, dest="train_fraction",
                   help="per-class train split fraction")
    p.add_argument("--seed", type=int, help="generator seed")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("pool", help="pool one bag of embeddings",
                       description="Read a bag (binary embedding file or "
                                   "numeric CSV) and write the fused "
                                   "embedding as JSON.")
    _add_config_flag(p)
    p.add_argument("--input", help="bag file: binary format or CSV (required)")
    p.add_argument("--kind", help=f"one of {', '.join(POOLING_KINDS)} (required)")
    p.add_argument("--params", help="model checkpoint supplying attention "
                                    "parameters")
    p.add_argument("--random-init", action="store_const", const=True,
                   dest="random_init", default=None,
                   help="draw fresh attention parameters from --seed")
    p.add_argument("--seed", type=int, help="seed for --random-init")
    p.add_argument("--hidden-width", "--K", type=int, dest="hidden_width",
                   help="attention hidden width for --random-init")
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(func=_cmd_pool)

    p = sub.add_parser("gradcheck",
                       help="verify analytic gradients against finite "
                            "differences",
                       description="Exit 0 only if every parameter group "
                                   "matches central finite differences within "
                                   "tolerance; this is the CI gate.")
    _add_config_flag(p)
    p.add_argument("--kind", choices=list(ATTENTION_KINDS) + ["all"],
                   help="which attention kind to check (default all)")
    p.add_argument("--trials", type=int, help="random triples per kind")
    p.add_argument("--seed", type=int, help="RNG seed")
    p.add_argument("--corrupt", action="store_const", const=True,
                   default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("params", help="report exact parameter counts",
                       description="Closed-form parameter accounting for one "
                                   "strategy.")
    _add_config_flag(p)
    p.add_argument("--kind", help=f"one of {', '.join(STRATEGIES)} (required)")
    p.add_argument("--hidden-width", "--K", type=int, dest="hidden_width",
                   help="attention hidden width (required)")
    p.add_argument("--dim", "--M", type=int, dest="dim",
                   help="instance embedding dimension (required)")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--encoder", choices=["identity", "mlp1"],
                   help="per-instance encoder")
    p.add_argument("--input-dim", type=int, dest="input_dim",
                   help="raw input dimension when the encoder projects")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim",
                   help="concat projection hidden width")
    p.add_argument("--max-images", type=int, dest="max_images",
                   help="concat projection instance cap")
    p.add_argument("--grid-side", type=int, dest="grid_side",
                   help="grid side for the grid strategy")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("train", help="train one model on a manifest",
                       description="Train a fusion strategy end to end and "
                                   "write checkpoint, history, curves, and a "
                                   "config snapshot under --out.")
    _add_config_flag(p)
    p.add_argument("--train", help="training manifest (required)")
    p.add_argument("--eval", help="optional eval manifest")
    p.add_argument("--out", help="artifact directory (required)")
    p.add_argument("--strategy", choices=STRATEGIES, help="fusion strategy")
    p.add_argument("--encoder", choices=["identity", "mlp1"],
                   help="per-instance encoder")
    p.add_argument("--encoded-dim", type=int, dest="encoded_dim",
                   help="encoder output dimension (mlp1 only)")
    p.add_argument("--hidden-width", "--K", type=int, dest="hidden_width",
                   help="attention hidden width")
    p.add_argument("--learning-rate", type=float, dest="learning_rate",
                   help="step size (0 freezes training)")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help="bags per update")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--optimizer", choices=["sgd", "adam"], help="update rule")
    p.add_argument("--max-images", type=int, dest="max_images",
                   help="concat strategy instance cap")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim",
                   help="concat projection hidden width")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest",
                       description="Score a trained model; with --out, also "
                                   "write metrics JSON and attention exports.")
    _add_config_flag(p)
    p.add_argument("--model", help="checkpoint path (required)")
    p.add_argument("--data", help="eval manifest (required)")
    p.add_argument("--out", help="artifact directory (optional)")
    p.add_argument("--attention-sample", type=int, dest="attention_sample",
                   help="bags shown in the attention heatmap")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="compare all fusion strategies",
                       description="Train every strategy under identical "
                                   "conditions and emit the comparison table "
                                   "(text, JSON-lines, CSV, chart).")
    _add_config_flag(p)
    p.add_argument("--train", help="training manifest")
    p.add_argument("--eval", help="eval manifest")
    p.add_argument("--preset", help="'default' generates the bundled "
                                    "synthetic task under --out/dataset")
    p.add_argument("--out", help="artifact directory (required)")
    p.add_argument("--strategies", help="comma list (default: "
                   f"{','.join(eval_mod.BENCHMARK_STRATEGIES)})")
    p.add_argument("--hidden-width", "--K", type=int, dest="hidden_width",
                   help="attention hidden width")
    p.add_argument("--learning-rate", type=float, dest="learning_rate",
                   help="step size")
    p.add_argument("--epochs", type=int, help="training epochs per strategy")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help="bags per update")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--optimizer", choices=["sgd", "adam"], help="update rule")
    p.add_argument("--max-images", type=int, dest="max_images",
                   help="concat strategy instance cap")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim",
                   help="concat projection hidden width")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        # argparse exits with its own code for --help (0) and usage (2).
        code = exc.code if isinstance(exc.code, int) else 2
        return code
    except UsageError as exc:
        _print_error(2, "usage", exc)
        return 2
    except (DataError, ShapeError) as exc:
        _print_error(3, "data", exc)
        return 3
    except OSError as exc:
        _print_error(3, "data", exc)
        return 3
    except MivcError as exc:
        _print_error(2, "usage", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
