"""Ablation grids: AdaLoRA-vs-LoRA variants over ranks, and the method comparison at rank 8."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import artifacts
from .checkpoint import atomic_write
from .config import RunConfig
from .peft import AdapterSpec, count_trainable
from .trainer import evaluate, make_task, run_training

TABLE1_RANKS = (1, 8, 32)
TABLE1_VARIANTS: dict[str, dict] = {
    "lora": {"method": "lora"},
    "adalora": {"method": "adalora"},
    "adalora_wo_orth": {"method": "adalora", "orth_on": False},
    "adalora_wo_alloc": {"method": "adalora", "alloc_on": False},
    "adalora_wo_both": {"method": "adalora", "orth_on": False, "alloc_on": False},
    "alpha_lora": {"method": "alpha_lora"},
}
TABLE2_METHODS = ("full_ft", "glora", "adalora", "lora", "bitfit", "ia3", "alpha_lora", "s2lora")
TABLE2_RANK = 8
GRIDS = ("table1", "table2")


@dataclass(frozen=True)
class Cell:
    name: str
    variant: str
    rank: int
    spec: AdapterSpec


def grid_cells(grid: str, base_spec: AdapterSpec | None = None) -> list[Cell]:
    base_spec = base_spec or AdapterSpec()
    if grid == "table1":
        return [
            Cell(f"{variant}_r{r}", variant, r, base_spec.with_(rank=r, **flags))
            for variant, flags in TABLE1_VARIANTS.items()
            for r in TABLE1_RANKS
        ]
    if grid == "table2":
        return [
            Cell(f"{m}_r{TABLE2_RANK}", m, TABLE2_RANK, base_spec.with_(method=m, rank=TABLE2_RANK))
            for m in TABLE2_METHODS
        ]
    raise ValueError(f"unknown grid {grid!r}; choose from {GRIDS}")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def run_cell(base_path: str, cfg: RunConfig, cell: Cell, out_dir: str) -> dict:
    """Train one cell from the saved base and write ``cells/<name>.json``; returns its metrics."""
    model, _ = artifacts.load_base(base_path)
    data = make_task(cfg.task, cfg.train.seed)
    adapted, run = run_training(model, cell.spec, cfg.train, cfg.task, data=data)
    count = count_trainable(cell.spec, model.arch)
    doc = {
        "cell": cell.name,
        "variant": cell.variant,
        "rank": cell.rank,
        "initial_rank": cell.spec.adalora_initial if cell.spec.method == "adalora" else None,
        "trainable": {"count": count.count, "percent": count.percent},
        **run.to_json_dict(),
    }
    atomic_write(Path(out_dir) / "cells" / f"{cell.name}.json", _dump(doc).encode("utf-8"))
    return run.metrics


def _fmt(value: float | None) -> str:
    return "failed" if value is None else f"{100.0 * value:.2f}"


def summary_csv(grid: str, cells: list[Cell], results: dict[str, dict | None], zero_shot: dict,
                cfg: RunConfig) -> str:
    """Table-shaped summary; token error rates in percent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")

    def metric(name: str, key: str) -> float | None:
        res = results.get(name)
        return None if res is None else res[key]

    if grid == "table1":
        ranks = TABLE1_RANKS
        w.writerow(["method"] + [f"in_domain r={r}" for r in ranks] + [f"ood r={r}" for r in ranks])
        w.writerow(["zero_shot"] + [_fmt(zero_shot["in_domain"])] * len(ranks) + [_fmt(zero_shot["ood"])] * len(ranks))
        for variant in TABLE1_VARIANTS:
            names = [f"{variant}_r{r}" for r in ranks]
            w.writerow([variant] + [_fmt(metric(n, "in_domain_ter")) for n in names]
                       + [_fmt(metric(n, "ood_ter")) for n in names])
    else:
        w.writerow(["method", "trainable_params", "in_domain", "ood"])
        w.writerow(["zero_shot", "-", _fmt(zero_shot["in_domain"]), _fmt(zero_shot["ood"])])
        for cell in cells:
            count = count_trainable(cell.spec, cfg.arch)
            w.writerow([cell.variant, count.percent, _fmt(metric(cell.name, "in_domain_ter")),
                        _fmt(metric(cell.name, "ood_ter"))])
    return buf.getvalue()


def run_grid(base_path: str, grid: str, out_dir: str, cfg: RunConfig, workers: int = 1,
             log=print) -> tuple[list[Cell], dict[str, dict | None]]:
    """Run every cell (optionally in worker processes), then write ``summary.csv``.

    Failed cells are reported as ``failed``; finished cells keep their JSON files.
    """
    model, _ = artifacts.load_base(base_path)
    cfg = RunConfig(model.arch, cfg.adapter, cfg.train, cfg.task, cfg.pretrain)
    cells = grid_cells(grid, cfg.adapter)
    for cell in cells:
        cell.spec.validate(model.arch)
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)

    data = make_task(cfg.task, cfg.train.seed)
    zero_shot = {name: evaluate(model, pairs, None, cfg.train.eval_batch_size)
                 for name, pairs in (("in_domain", data.in_domain_eval), ("ood", data.ood_eval))}

    results: dict[str, dict | None] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {c.name: pool.submit(run_cell, base_path, cfg, c, out_dir) for c in cells}
            for cell in cells:
                results[cell.name] = _collect(cell, futures[cell.name].result, log)
    else:
        for cell in cells:
            results[cell.name] = _collect(cell, lambda c=cell: run_cell(base_path, cfg, c, out_dir), log)
    atomic_write(out / "summary.csv", summary_csv(grid, cells, results, zero_shot, cfg).encode("utf-8"))
    return cells, results


def _collect(cell: Cell, fetch, log) -> dict | None:
    try:
        metrics = fetch()
    except Exception as exc:  # one bad cell must not discard the rest of the grid
        log(f"{cell.name}: FAILED ({type(exc).__name__}: {exc})")
        return None
    log(f"{cell.name}: in_domain_ter={metrics['in_domain_ter']:.4f} ood_ter={metrics['ood_ter']:.4f}")
    return metrics
