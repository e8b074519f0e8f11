"""Pretrain-and-probe experiment orchestration: single runs, strategy
ablations, and cluster-count sweeps.

Run directories are content-addressed by (config hash, seed); a finished
run leaves a result.json that later invocations reuse instead of
recomputing, so overlapping experiments share work.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import TrainConfig, config_from_dict
from .errors import ConfigError
from .probes import pixel_probe
from .synthdata import generate_dataset
from .trainer import fit

RESULT_FILE = "result.json"


def run_dir_for(root: str | Path, config: TrainConfig) -> Path:
    return Path(root) / f"{config.config_hash()}-s{config.train.seed}"


def run_pretrain_and_probe(
    config_values: dict[str, str], seed: int, root: str | Path
) -> dict:
    """One full pretrain + pixel probe; cached by (config hash, seed)."""
    values = dict(config_values)
    values["train.seed"] = str(seed)
    config = config_from_dict(values)
    run_dir = run_dir_for(root, config)
    result_path = run_dir / RESULT_FILE
    if result_path.exists():
        return json.loads(result_path.read_text())

    dataset = generate_dataset(
        config.data.n_samples,
        config.data.num_classes,
        config.data.image_size,
        rng_seed=config.train.seed,
    )
    t0 = time.perf_counter()
    fit_result = fit(config, dataset, run_dir)
    wall_time = time.perf_counter() - t0
    miou, report = pixel_probe(fit_result.checkpoint_path, dataset)
    (run_dir / "report_pixel.jsonl").write_text(report.to_line() + "\n")

    result = {
        "run_id": f"{config.config_hash()}-s{seed}",
        "strategy": config.loss.strategy,
        "k": config.kmeans.k if config.loss.strategy == "km" else config.proto.k,
        "seed": seed,
        "miou": miou,
        "wall_time": wall_time,
        "checkpoint": str(fit_result.checkpoint_path),
        "config_hash": config.config_hash(),
    }
    result_path.write_text(json.dumps(result, sort_keys=True, indent=2))
    return result


def _run_many(
    jobs_spec: list[tuple[dict[str, str], int]], root: str | Path, jobs: int
) -> list[dict]:
    if jobs <= 1:
        return [run_pretrain_and_probe(v, s, root) for v, s in jobs_spec]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(run_pretrain_and_probe, v, s, root) for v, s in jobs_spec
        ]
        return [f.result() for f in futures]


def ablate(
    config: TrainConfig,
    strategies: list[str],
    seeds: list[int],
    root: str | Path,
    jobs: int = 1,
) -> list[dict]:
    """Pretrain + pixel probe per (strategy, seed); rows sorted by median
    mIoU, best first."""
    if len(set(strategies)) != len(strategies):
        raise ConfigError(f"duplicate strategy in {strategies}")
    spec = []
    for strategy in strategies:
        values = config.with_overrides({"loss.strategy": strategy}).to_dict()
        for seed in seeds:
            spec.append((values, seed))
    results = _run_many(spec, root, jobs)

    rows = []
    for strategy in strategies:
        mious = [r["miou"] for r in results if r["strategy"] == strategy]
        rows.append(
            {
                "strategy": strategy,
                "miou_median": statistics.median(mious),
                "miou_per_seed": mious,
                "seeds": list(seeds),
            }
        )
    rows.sort(key=lambda r: r["miou_median"], reverse=True)
    return rows


def sweep_k(
    config: TrainConfig,
    k_values: list[int],
    seeds: list[int],
    root: str | Path,
    jobs: int = 1,
) -> list[dict]:
    """Full pretrain + probe per (K, seed) at fixed steps; one row per K
    with median mIoU and median wall time."""
    if config.loss.strategy not in ("km", "pm"):
        raise ConfigError(
            f"sweep_k requires strategy km or pm, got {config.loss.strategy!r}"
        )
    key = "kmeans.k" if config.loss.strategy == "km" else "proto.k"
    if len(set(k_values)) != len(k_values):
        raise ConfigError(f"duplicate K in {k_values}")
    spec = []
    for k in k_values:
        values = config.with_overrides({key: str(k)}).to_dict()
        for seed in seeds:
            spec.append((values, seed))
    results = _run_many(spec, root, jobs)

    rows = []
    for k in k_values:
        per_k = [r for r in results if r["k"] == k]
        rows.append(
            {
                "k": k,
                "miou_median": statistics.median(r["miou"] for r in per_k),
                "wall_time_median": statistics.median(r["wall_time"] for r in per_k),
            }
        )
    rows.sort(key=lambda r: r["k"])
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "miou_median", "miou_per_seed"])
        for row in rows:
            writer.writerow(
                [
                    row["strategy"],
                    f"{row['miou_median']:.6f}",
                    " ".join(f"{m:.6f}" for m in row["miou_per_seed"]),
                ]
            )
    return path


def write_sweep_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "probe_miou", "wall_time"])
        for row in rows:
            writer.writerow(
                [row["k"], f"{row['miou_median']:.6f}", f"{row['wall_time_median']:.3f}"]
            )
    return path
