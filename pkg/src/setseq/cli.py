"""Command-line entry point.

Subcommands: train-sort, train-star, train-ngram, order-search, eval, report.
Flags mirror TrainConfig fields; a line-oriented key = value config file
(# comments) can seed any field, with explicit flags taking precedence.
Exit codes: 0 success, 1 training abort, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .harness import (
    ConfigError,
    TrainConfig,
    TrainingAborted,
    evaluate_checkpoint,
    read_metrics,
    summarize_metrics,
    train,
)


def parse_ordering(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad ordering {text!r}; expected e.g. 5,1,3,4,2") from e


def parse_candidates(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(parse_ordering(part) for part in text.split(";") if part)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def coerce_field(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    if name == "fixed_ordering":
        return parse_ordering(raw)
    if name == "candidates":
        return parse_candidates(raw)
    kind = _FIELD_TYPES[name]
    if kind == "int":
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{name} expects an integer, got {raw!r}") from e
    if kind == "float":
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{name} expects a number, got {raw!r}") from e
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name} expects true/false, got {raw!r}")
    return raw


def parse_config_file(path) -> dict:
    out = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = (part.strip() for part in line.split("=", 1))
                out[key] = coerce_field(key, value)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return out


def build_config(args: argparse.Namespace, overrides: dict) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    values.update(overrides)
    for f in dataclasses.fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    try:
        return TrainConfig(**values).validate()
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="run directory for metrics/checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--val-every", type=int, dest="val_every")
    p.add_argument("--val-size", type=int, dest="val_size")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--lstm-hidden", type=int, dest="lstm_hidden")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--memory-dim", type=int, dest="memory_dim")
    p.add_argument("--reader-hidden", type=int, dest="reader_hidden")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setseq",
                                     description="set encoders, pointer decoders, "
                                                 "and output-order search")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-sort", help="train a sorter on uniform floats")
    _add_common(p)
    p.add_argument("--n", type=int, help="set size")
    p.add_argument("--model", choices=["read-process-write", "ptr-net-baseline"])
    p.add_argument("--process-steps", type=int, dest="process_steps")
    p.add_argument("--glimpses", type=int)
    p.add_argument("--scorer", choices=["dot", "additive"])

    p = sub.add_parser("train-star", help="train a sequence model on star samples")
    _add_common(p)
    p.add_argument("--children", type=int, dest="star_children")
    p.add_argument("--vocab", type=int, dest="star_vocab")
    p.add_argument("--peakiness", type=float, dest="star_peakiness")
    p.add_argument("--train-samples", type=int, dest="star_train_samples")
    p.add_argument("--order", choices=["head_first", "head_last"], dest="star_order")

    p = sub.add_parser("train-ngram", help="train a positioned-token model "
                                           "under a fixed ordering")
    _add_common(p)
    p.add_argument("--vocab", type=int, dest="ngram_vocab")
    p.add_argument("--gram-len", type=int, dest="gram_len")
    p.add_argument("--corpus-train", type=int, dest="corpus_train")
    p.add_argument("--corpus-valid", type=int, dest="corpus_valid")
    p.add_argument("--concentration", type=float, dest="markov_concentration")
    p.add_argument("--ordering", type=parse_ordering, dest="fixed_ordering",
                   help="serialization order, e.g. 5,1,3,4,2")

    p = sub.add_parser("order-search", help="train-ngram with search over orderings")
    _add_common(p)
    p.add_argument("--vocab", type=int, dest="ngram_vocab")
    p.add_argument("--gram-len", type=int, dest="gram_len")
    p.add_argument("--corpus-train", type=int, dest="corpus_train")
    p.add_argument("--corpus-valid", type=int, dest="corpus_valid")
    p.add_argument("--concentration", type=float, dest="markov_concentration")
    p.add_argument("--pretrain-steps", type=int, dest="pretrain_steps")
    p.add_argument("--pretrain-orderings", type=int, dest="pretrain_orderings")
    p.add_argument("--selection", choices=["sampled", "exhaustive"])
    p.add_argument("--candidates", type=parse_candidates,
                   help="semicolon-separated orderings, e.g. 1,2,3,4,5;5,1,3,4,2")
    p.add_argument("--pretrain-mode", choices=["mean-nll", "logsumexp"],
                   dest="pretrain_mode")

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh task data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True,
                   help="config file of the run (run dirs contain config.txt)")

    p = sub.add_parser("report", help="summarize a metrics.csv file")
    p.add_argument("metrics", nargs="+")
    return parser


TASK_OVERRIDES = {
    "train-sort": {"task": "sort"},
    "train-star": {"task": "star"},
    "train-ngram": {"task": "ngram", "search": False},
    "order-search": {"task": "ngram", "search": True},
}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in TASK_OVERRIDES:
            config = build_config(args, dict(TASK_OVERRIDES[args.command]))
            result = train(config, args.out)
            for name, value in sorted(result.final.items()):
                print(f"{name} = {value}")
            if result.out_dir:
                print(f"run artifacts in {result.out_dir}")
            return 0
        if args.command == "eval":
            values = parse_config_file(args.config)
            config = TrainConfig(**values).validate()
            stats = evaluate_checkpoint(config, args.checkpoint)
            for name, value in sorted(stats.items()):
                print(f"{name} = {value}")
            return 0
        if args.command == "report":
            for path in args.metrics:
                print(f"== {path}")
                print(summarize_metrics(read_metrics(path)))
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        for key, value in e.diagnostics.items():
            if key != "parameter_norms":
                print(f"  {key}: {value}", file=sys.stderr)
        norms = e.diagnostics.get("parameter_norms", {})
        for name, norm in norms.items():
            print(f"  |{name}| = {norm:.6g}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
