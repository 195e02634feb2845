"""Component-ablation and bank-size-sweep harness.

Four configurations (baseline, +sampling, +sampling+contrast, full with
negative prototypes) each run over several seeds; a second sweep varies the
bank capacity at the full configuration. Completed runs leave a DONE
marker next to their echoed config and are reused on re-runs, so the
harness is resumable and idempotent.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import TrainConfig, serialize_config
from .dataset import load as load_dataset
from .evaluation import evaluate_dataset, write_report
from .training import run_training

CELL_NAMES = ("baseline", "pls", "pls_cl", "full")


def config_for_cell(base: TrainConfig, cell: str) -> TrainConfig:
    """Ablation rows: which of sampling / contrast / negatives is active."""
    if cell == "baseline":
        return replace(base, pls_enabled=False, lam=0.0, bank_negatives=False)
    if cell == "pls":
        return replace(base, pls_enabled=True, lam=0.0, bank_negatives=False)
    if cell == "pls_cl":
        return replace(base, pls_enabled=True, bank_negatives=False)
    if cell == "full":
        return replace(base, pls_enabled=True, bank_negatives=True)
    raise ValueError(f"unknown ablation cell {cell!r}")


def run_cell(train_dir: str | Path, test_dir: str | Path, out_dir: str | Path, config: TrainConfig) -> dict:
    """Train + evaluate one (config, seed) cell, reusing a finished run."""
    out = Path(out_dir)
    done = out / "DONE"
    cfg_text = serialize_config(config)
    if done.exists() and (out / "config.txt").exists():
        if (out / "config.txt").read_text() == cfg_text and (out / "eval.json").exists():
            return json.loads((out / "eval.json").read_text())
    out.mkdir(parents=True, exist_ok=True)
    state = run_training(train_dir, out, config, resume=True, quiet=True)
    test = load_dataset(test_dir)
    result = evaluate_dataset(state.net, test, config.nms_threshold)
    write_report(result, test.class_names, out)
    # loss-curve sanity: median L_mil over the last tenth vs the first tenth
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    tenth = max(1, len(rows) // 10)
    first = float(np.median([r["L_mil"] for r in rows[:tenth]]))
    last = float(np.median([r["L_mil"] for r in rows[-tenth:]]))
    payload = json.loads((out / "eval.json").read_text())
    payload["loss_curve"] = {"first_tenth_median_L_mil": first, "last_tenth_median_L_mil": last}
    (out / "eval.json").write_text(json.dumps(payload, indent=1) + "\n")
    done.write_text("ok\n")
    return payload


def _cell_worker(args):
    train_dir, test_dir, out_dir, cfg_text = args
    from .config import parse_assignments

    config = TrainConfig(**parse_assignments(cfg_text.splitlines()))
    return str(out_dir), run_cell(train_dir, test_dir, out_dir, config)


def run_matrix(
    train_dir: str | Path,
    test_dir: str | Path,
    out_root: str | Path,
    jobs: list[tuple[str, TrainConfig]],
    parallel: int = 2,
) -> dict[str, dict]:
    """Run named (relative-path, config) jobs, ``parallel`` processes at a time."""
    out_root = Path(out_root)
    tasks = [
        (str(train_dir), str(test_dir), str(out_root / name), serialize_config(cfg))
        for name, cfg in jobs
    ]
    results: dict[str, dict] = {}
    if parallel <= 1 or len(tasks) <= 1:
        for t in tasks:
            key, payload = _cell_worker(t)
            results[Path(key).relative_to(out_root).as_posix()] = payload
        return results
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        for key, payload in pool.map(_cell_worker, tasks):
            results[Path(key).relative_to(out_root).as_posix()] = payload
    return results


def run_ablation(
    train_dir: str | Path,
    test_dir: str | Path,
    out_root: str | Path,
    base_config: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    bank_sizes: tuple[int, ...] = (2, 4, 6, 8),
    parallel: int = 2,
    cells: tuple[str, ...] = CELL_NAMES,
) -> dict:
    """The component table plus the bank-size sweep; medians across seeds."""
    jobs: list[tuple[str, TrainConfig]] = []
    for cell in cells:
        for seed in seeds:
            cfg = replace(config_for_cell(base_config, cell), seed=seed)
            jobs.append((f"{cell}/seed{seed}", cfg))
    for m in bank_sizes:
        if m == base_config.bank_size:
            continue  # identical to the full cell
        for seed in seeds:
            cfg = replace(config_for_cell(base_config, "full"), seed=seed, bank_size=m)
            jobs.append((f"bank_m{m}/seed{seed}", cfg))
    results = run_matrix(train_dir, test_dir, out_root, jobs, parallel)

    def med(prefix: str) -> dict:
        rows = [v for k, v in results.items() if k.startswith(prefix + "/")]
        maps = sorted(r["map"] for r in rows)
        classes = list(rows[0]["per_class_ap"]) if rows else []
        return {
            "median_map": float(np.median(maps)) if maps else float("nan"),
            "maps": maps,
            "median_per_class": {
                name: float(np.median([r["per_class_ap"][name] for r in rows if r["per_class_ap"][name] is not None]))
                for name in classes
            },
        }

    report = {
        "cells": {cell: med(cell) for cell in cells},
        "bank_sweep": {},
        "seeds": list(seeds),
    }
    for m in bank_sizes:
        key = "full" if m == base_config.bank_size else f"bank_m{m}"
        if any(k.startswith(key + "/") for k in results):
            report["bank_sweep"][str(m)] = med(key)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "ablation.json").write_text(json.dumps(report, indent=1) + "\n")
    (out_root / "ablation.txt").write_text(format_ablation(report))
    return report


def format_ablation(report: dict) -> str:
    lines = []
    cells = report["cells"]
    class_names = []
    for cell in cells.values():
        if cell["median_per_class"]:
            class_names = list(cell["median_per_class"])
            break
    header = f"{'configuration':<14}" + "".join(f"{n[:9]:>10}" for n in class_names) + f"{'mAP':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for name, cell in cells.items():
        row = f"{name:<14}"
        for n in class_names:
            row += f"{cell['median_per_class'].get(n, float('nan')):>10.4f}"
        row += f"{cell['median_map']:>10.4f}"
        lines.append(row)
    if report["bank_sweep"]:
        lines.append("")
        lines.append(f"{'bank size M':<14}{'median mAP':>12}")
        for m, cell in sorted(report["bank_sweep"].items(), key=lambda kv: int(kv[0])):
            lines.append(f"{m:<14}{cell['median_map']:>12.4f}")
    return "\n".join(lines) + "\n"
