"""Command-line entry point.

Subcommands: pretrain, probe, ablate, sweep-k, heatmap. Exit codes:
0 success, 1 usage or config error, 2 runtime or numeric failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

from .checkpoint import checkpoint_name
from .config import TrainConfig, load_config, parse_overrides
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    NumericsError,
)
from .experiments import (
    ablate,
    run_dir_for,
    sweep_k,
    write_ablation_csv,
    write_sweep_csv,
)
from .probes import emit_heatmap, linear_probe, pixel_probe
from .synthdata import generate_dataset
from .trainer import fit, load_train_checkpoint

MANIFEST_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        raise ConfigError(message)


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="mgcl")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="config file path")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output root")

    p_pre = sub.add_parser("pretrain", help="run the pretraining loop")
    common(p_pre)
    p_pre.add_argument("--resume", action="store_true", help="resume an existing run dir")

    p_probe = sub.add_parser("probe", help="evaluate a checkpoint with a frozen probe")
    p_probe.add_argument("--checkpoint", type=Path, required=True)
    p_probe.add_argument("--kind", choices=("linear", "pixel"), required=True)
    p_probe.add_argument("--out", type=Path, default=None)

    p_abl = sub.add_parser("ablate", help="compare semantic strategies")
    common(p_abl)
    p_abl.add_argument("--strategies", required=True, help="comma-separated list")
    p_abl.add_argument("--seeds", default="0", help="comma-separated seeds")
    p_abl.add_argument("--jobs", type=int, default=1)

    p_sweep = sub.add_parser("sweep-k", help="sweep the cluster count")
    common(p_sweep)
    p_sweep.add_argument("--k-values", required=True, help="comma-separated K values")
    p_sweep.add_argument("--seeds", default="0", help="comma-separated seeds")
    p_sweep.add_argument("--jobs", type=int, default=1)

    p_heat = sub.add_parser("heatmap", help="emit a cell-similarity heatmap")
    p_heat.add_argument("--checkpoint", type=Path, required=True)
    p_heat.add_argument("--sample-index", type=int, default=0)
    p_heat.add_argument("--anchor", default="0,0", help="ROW,COL of the anchor cell")
    p_heat.add_argument("--out", type=Path, default=None)
    return parser


def _resolve_config(args) -> TrainConfig:
    overrides = parse_overrides(args.set)
    config = load_config(args.config, overrides)
    if args.seed is not None:
        config = config.with_overrides({"train.seed": str(args.seed)})
    return config


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def _write_manifest(run_dir: Path, config: TrainConfig, artifacts: dict) -> Path:
    manifest = {
        "format_version": MANIFEST_VERSION,
        "run_id": f"{config.config_hash()}-s{config.train.seed}",
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "seed": config.train.seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return path


def _cmd_pretrain(args) -> int:
    config = _resolve_config(args)
    run_dir = run_dir_for(args.out, config)
    manifest_path = run_dir / "manifest.json"
    resume_from = None
    if args.resume:
        ckpts = sorted(run_dir.glob("ckpt_*"))
        if not ckpts:
            raise ConfigError(f"--resume given but no checkpoints in {run_dir}")
        resume_from = ckpts[-1]
    elif manifest_path.exists():
        raise ConfigError(
            f"run directory {run_dir} already exists for this config and seed; "
            f"use --resume or change the seed"
        )

    dataset = generate_dataset(
        config.data.n_samples,
        config.data.num_classes,
        config.data.image_size,
        rng_seed=config.train.seed,
    )
    result = fit(config, dataset, run_dir, resume_from=resume_from)
    _write_manifest(
        run_dir,
        config,
        {
            "checkpoint": result.checkpoint_path,
            "metrics": result.metrics_path,
            "final_checkpoint_name": checkpoint_name(
                len(dataset) // config.train.batch_size * config.train.epochs
            ),
        },
    )
    print(run_dir)
    return EXIT_OK


def _cmd_probe(args) -> int:
    _state, config, _meta = load_train_checkpoint(args.checkpoint)
    dataset = generate_dataset(
        config.data.n_samples,
        config.data.num_classes,
        config.data.image_size,
        rng_seed=config.train.seed,
    )
    if args.kind == "linear":
        _metric, report = linear_probe(args.checkpoint, dataset)
    else:
        _metric, report = pixel_probe(args.checkpoint, dataset)
    out_dir = args.out if args.out is not None else args.checkpoint.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"report_{args.kind}.jsonl"
    report_path.write_text(report.to_line() + "\n")
    print(report.to_line())
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _resolve_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    seeds = _parse_int_list(args.seeds, "--seeds")
    rows = ablate(config, strategies, seeds, args.out, jobs=args.jobs)
    csv_path = write_ablation_csv(rows, Path(args.out) / "ablation.csv")
    print(f"{'strategy':<10} {'miou_median':>12}")
    for row in rows:
        print(f"{row['strategy']:<10} {row['miou_median']:>12.4f}")
    print(csv_path)
    return EXIT_OK


def _cmd_sweep_k(args) -> int:
    config = _resolve_config(args)
    k_values = _parse_int_list(args.k_values, "--k-values")
    seeds = _parse_int_list(args.seeds, "--seeds")
    rows = sweep_k(config, k_values, seeds, args.out, jobs=args.jobs)
    csv_path = write_sweep_csv(rows, Path(args.out) / "sweep_k.csv")
    print(f"{'k':>6} {'probe_miou':>12} {'wall_time':>10}")
    for row in rows:
        print(f"{row['k']:>6} {row['miou_median']:>12.4f} {row['wall_time_median']:>10.2f}")
    print(csv_path)
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    _state, config, _meta = load_train_checkpoint(args.checkpoint)
    try:
        row, col = (int(tok) for tok in args.anchor.split(","))
    except ValueError as exc:
        raise ConfigError(f"--anchor expects ROW,COL, got {args.anchor!r}") from exc
    dataset = generate_dataset(
        max(args.sample_index + 1, 1),
        config.data.num_classes,
        config.data.image_size,
        rng_seed=config.train.seed,
    )
    out_dir = args.out if args.out is not None else args.checkpoint.parent
    txt_path, png_path, _grid = emit_heatmap(
        args.checkpoint,
        dataset[args.sample_index].image,
        (row, col),
        out_dir,
        stem=f"heatmap_sample{args.sample_index}_r{row}c{col}",
    )
    print(txt_path)
    print(png_path)
    return EXIT_OK


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "ablate": _cmd_ablate,
    "sweep-k": _cmd_sweep_k,
    "heatmap": _cmd_heatmap,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointCorruptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
