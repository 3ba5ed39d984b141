"""Command-line entry point: data generation, training, evaluation,
prediction, and experiment sweeps.

Every command is deterministic given its inputs and seed, writes output files
atomically (a partial artifact is never left behind), and exits 0 only when
the requested artifact was fully written. Config files are JSON; the --seed
flag overrides the config's seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import (
    DatasetFormatError,
    SyntheticConfig,
    generate_synthetic,
    inverse_log_transform,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .metrics import SplitReport
from .models import ModelFormatError, load_model, save_model
from .training import (
    FeatureContext,
    SweepSpec,
    TrainingConfig,
    TrainingDiverged,
    as_trained_model,
    evaluate_split,
    model_predict,
    run_experiment_suite,
    select_constraint_weight,
    train_baseline_regression,
    train_joint,
)

REPORT_SCHEMA_VERSION = 1

DEFAULT_PERCENTILE_SWEEP = (0.4, 0.5, 0.6, 0.7, 0.8)
DEFAULT_THRESHOLD_SWEEP = (0.100, 0.125, 0.150, 0.175, 0.200)

SPLIT_CHOICES = ("train", "val", "test", "all")


class ConfigError(ValueError):
    """A config file failed validation; reported as a usage error."""


def _log(args, message: str) -> None:
    if getattr(args, "verbose", False):
        print(message, file=sys.stderr)


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def _load_config(path, loader, what: str):
    if path is None:
        return loader({})
    try:
        with open(path, "r", encoding="ascii") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{what} config {path} must hold a JSON object")
    try:
        return loader(data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{what} config {path}: {exc}") from exc


def _select_split(items, which: str, fractions, seed: int):
    if which == "all":
        return items
    train, val, test = split_dataset(items, fractions, seed)
    return {"train": train, "val": val, "test": test}[which]


def _load_items(path):
    items = load_dataset(path)
    if not items:
        raise ValueError(f"dataset {path} is empty")
    return items


def _check_model_compat(model, items):
    visual_dim = items[0].visual.shape[0]
    if visual_dim != model.head_config.visual_dim:
        raise ValueError(
            f"visual dimension mismatch: model expects "
            f"{model.head_config.visual_dim}, dataset has {visual_dim}"
        )
    max_token = max(int(it.tokens.max()) for it in items)
    if max_token >= model.head_config.vocab_size:
        raise ValueError(
            f"token id {max_token} out of range: model vocabulary is "
            f"{model.head_config.vocab_size}"
        )


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, SyntheticConfig.from_dict, "generator")
    if args.seed is not None:
        cfg = SyntheticConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.n_items is not None:
        cfg = SyntheticConfig.from_dict({**cfg.to_dict(), "n_items": args.n_items})
    items, _ = generate_synthetic(cfg)
    save_dataset(items, args.out, include_quality_hints=args.keep_quality_hints)
    n_sold = sum(1 for it in items if it.status == "sold")
    print(f"wrote {len(items)} items ({n_sold} sold, {len(items) - n_sold} unsold) to {args.out}")
    return 0


def _training_config(args) -> TrainingConfig:
    cfg = _load_config(args.config, TrainingConfig.from_dict, "training")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = TrainingConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def cmd_train(args) -> int:
    cfg = _training_config(args)
    items = _load_items(args.data)
    train_items = _select_split(items, args.split, cfg.split_fractions, cfg.seed)
    if not train_items:
        raise ValueError(f"split '{args.split}' of {args.data} is empty")
    if args.tune_constraint_weight:
        _, val_items, _ = split_dataset(items, cfg.split_fractions, cfg.seed)
        best, trials = select_constraint_weight(train_items, val_items, cfg)
        knob = "beta" if cfg.constraint.mode == "percentile" else "gamma"
        _log(args, f"selected {knob}={best} from grid {[t['value'] for t in trials]}")
        constraint = dict(cfg.constraint.to_dict())
        constraint[knob] = best
        cfg = TrainingConfig.from_dict({**cfg.to_dict(), "constraint": constraint})
    _log(args, f"training '{cfg.trainer}' on {len(train_items)} items")
    if cfg.trainer == "baseline":
        result = train_baseline_regression(train_items, cfg)
    else:
        result = train_joint(train_items, cfg)
    model = as_trained_model(result, cfg)
    save_model(model, args.model_out)
    history_path = args.history_out or f"{args.model_out}.history.jsonl"
    _atomic_write(
        history_path,
        "".join(_dump_json(record) for record in result.history.to_records()),
    )
    final = result.history.epochs[-1].objective if len(result.history) else float("nan")
    print(
        f"trained {cfg.trainer} model on {len(train_items)} items "
        f"({len(result.history)} epochs, final objective {final:.6f}); "
        f"model -> {args.model_out}, history -> {history_path}"
    )
    return 0


def _report_payload(report: SplitReport, model, split: str, n_items: int) -> dict:
    payload = report.to_dict()
    payload.update(
        {
            "schema_version": REPORT_SCHEMA_VERSION,
            "constraint": model.constraint.to_dict(),
            "range": model.range_params.to_dict(),
            "ablation": model.ablation,
            "split": split,
            "n_items": n_items,
        }
    )
    return payload


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    if model.classifier is None:
        raise ValueError(
            "model has no classifier (baseline regressor); evaluation needs "
            "a jointly trained model"
        )
    items = _load_items(args.data)
    # Split membership matches the training run: default fractions, model seed.
    subset = _select_split(items, args.split, TrainingConfig().split_fractions, model.seed)
    if not subset:
        raise ValueError(f"split '{args.split}' of {args.data} is empty")
    _check_model_compat(model, subset)
    ctx = FeatureContext(model.stats, model.standardizer)
    report = evaluate_split(
        model.classifier, model.regressor, subset,
        model.range_params, ctx, model.ablation,
    )
    _atomic_write(args.report_out, _dump_json(_report_payload(report, model, args.split, len(subset))))
    print(
        f"evaluated {len(subset)} items: {report.positive_count} positive "
        f"({report.positive_fraction:.2%}), positive SMLE {report.positive.smle:.4f}, "
        f"negative SMLE {report.negative.smle:.4f}; report -> {args.report_out}"
    )
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    items = _load_items(args.data)
    subset = _select_split(items, args.split, TrainingConfig().split_fractions, model.seed)
    if not subset:
        raise ValueError(f"split '{args.split}' of {args.data} is empty")
    _check_model_compat(model, subset)
    predictions = model_predict(model, subset)
    lines = []
    for item, pred in zip(subset, predictions):
        record = {"id": item.item_id, "confidence": pred.confidence}
        if pred.hard_label:
            record["verdict"] = "positive"
            record["suggested_log_price"] = pred.suggested_log_price
            record["suggested_price_chn"] = inverse_log_transform(pred.suggested_log_price)
        else:
            record["verdict"] = "update encouraged"
        lines.append(_dump_json(record))
    _atomic_write(args.out, "".join(lines))
    n_pos = sum(1 for p in predictions if p.hard_label)
    print(f"predicted {len(subset)} items ({n_pos} positive); output -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _training_config(args)
    items = _load_items(args.data)
    if args.values is not None:
        try:
            values = tuple(float(v) for v in args.values.split(","))
        except ValueError as exc:
            raise ConfigError(f"--values must be comma-separated numbers: {exc}") from exc
    elif args.kind == "percentile":
        values = DEFAULT_PERCENTILE_SWEEP
    elif args.kind == "threshold":
        values = DEFAULT_THRESHOLD_SWEEP
    else:
        values = ()
    spec = SweepSpec(kind=args.kind, values=values)
    _log(args, f"running {args.kind} sweep over {values or 'ablations'}")
    rows = run_experiment_suite(items, cfg, spec)
    payload = {"schema_version": REPORT_SCHEMA_VERSION, "kind": args.kind, "rows": rows}
    _atomic_write(args.report_out, _dump_json(payload))
    print(f"swept {len(rows)} configurations; report -> {args.report_out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resale-pricing",
        description="Price suggestion for second-hand listings: generate data, "
        "train the joint classifier/regressor, evaluate, predict, and sweep.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic marketplace dataset")
    p.add_argument("--out", required=True, help="dataset file to write (JSONL)")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--n-items", type=int, help="override the item count")
    p.add_argument(
        "--keep-quality-hints", action="store_true",
        help="keep generator ground-truth flags in the file (debugging only)",
    )
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset split")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--model-out", required=True, help="model file to write")
    p.add_argument("--history-out", help="per-epoch history JSONL (default <model>.history.jsonl)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--split", choices=SPLIT_CHOICES, default="train")
    p.add_argument(
        "--tune-constraint-weight", action="store_true",
        help="pick beta/gamma on the validation split before training",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute the metric report for a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report-out", required=True)
    p.add_argument("--split", choices=SPLIT_CHOICES, default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="emit per-item verdicts and suggested prices")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=SPLIT_CHOICES, default="all")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="train and evaluate a family of configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="base training config JSON")
    p.add_argument("--kind", choices=("percentile", "threshold", "ablation"), required=True)
    p.add_argument("--values", help="comma-separated sweep values (percentile/threshold)")
    p.add_argument("--report-out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (
        ValueError,
        DatasetFormatError,
        ModelFormatError,
        TrainingDiverged,
        FloatingPointError,
        OSError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
