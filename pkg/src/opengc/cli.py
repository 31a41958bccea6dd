"""Command-line entry points.

Subcommands: ``generate`` (synthetic dataset), ``condense`` (one task),
``evaluate`` (sequential protocol + metrics), ``report`` (render stored
metrics).  Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.  ``--seed`` is mandatory wherever randomness is
involved; nothing reads the wall clock.  ``OPENGC_THREADS`` caps BLAS
parallelism and defaults to 1 for reproducible runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .condense import CondenseConfig, condense, config_hash, save_condensed
from .datagen import preset, write_dataset
from .errors import DataError, NumericalError, UsageError
from .graph import load_sequence, make_splits
from .openset import evaluate_sequence, load_metrics, metrics_dict, render_tsv, write_metrics

# config-file key -> CondenseConfig attribute ("lambda" is reserved in python)
_KEY_ALIASES = {"lambda": "lam"}
_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(CondenseConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1, not argparse's default 2
        raise UsageError(f"{message}\n{self.format_usage()}")


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key=value`` file; '#' starts a comment, unknown keys are
    rejected."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str):
    default = getattr(CondenseConfig(), key)
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def build_config(config_path: str | None, overrides: dict) -> CondenseConfig:
    """Defaults, then config file, then CLI flags."""
    kwargs = {}
    if config_path:
        for key, value in parse_config_file(config_path).items():
            kwargs[key] = _coerce(key, value)
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    try:
        cfg = CondenseConfig(**kwargs)
        cfg.validate()
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return cfg


def _add_generate(sub):
    p = sub.add_parser("generate", help="write a synthetic evolving-graph dataset")
    p.add_argument("--preset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)


def _add_condense(sub):
    p = sub.add_parser("condense", help="condense one task of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="run the sequential evaluation protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--from-task", type=int, default=1, dest="from_task")
    p.add_argument("--config", default=None)
    p.add_argument("--openset", choices=("softmax", "openmax"), default="softmax")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)


def _add_report(sub):
    p = sub.add_parser("report", help="render stored metrics")
    p.add_argument("--metrics", required=True)
    p.add_argument("--format", choices=("tsv", "json"), default="tsv")


def _cmd_generate(args) -> int:
    params = preset(args.preset, seed=args.seed)
    write_dataset(params, args.out)
    print(f"wrote dataset {args.preset} (seed {args.seed}) to {args.out}")
    return 0


def _cmd_condense(args) -> int:
    cfg = build_config(args.config, {"ratio": args.ratio, "seed": args.seed})
    seq = load_sequence(args.data, up_to_task=args.task)
    splits = make_splits(seq, seed=cfg.seed)
    cond = condense(seq, splits, cfg, task=args.task)
    save_condensed(cond, args.out)
    print(
        f"condensed task {args.task}: {cond.num_condensed} nodes "
        f"(ratio {cond.metadata['compress_ratio']:.4f}, "
        f"val acc {cond.metadata['best_val_acc']:.4f}) -> {args.out}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = build_config(args.config, {"seed": args.seed})
    seq = load_sequence(args.data)
    splits = make_splits(seq, seed=cfg.seed)
    perf = evaluate_sequence(
        seq,
        splits,
        condense,
        cfg,
        openset_mode=args.openset,
        from_task=args.from_task,
    )
    metrics = metrics_dict(
        perf, config_hash(cfg), seeds={"master": cfg.seed}, openset_mode=args.openset
    )
    write_metrics(args.out, metrics)
    print(f"mAP {metrics['map']:.6f} -> {args.out}")
    return 0


def _cmd_report(args) -> int:
    metrics = load_metrics(args.metrics)
    if args.format == "tsv":
        sys.stdout.write(render_tsv(metrics))
    else:
        json.dump(metrics, sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "condense": _cmd_condense,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _Parser(prog="opengc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate(sub)
    _add_condense(sub)
    _add_evaluate(sub)
    _add_report(sub)
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
