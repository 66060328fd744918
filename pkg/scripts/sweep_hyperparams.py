#!/usr/bin/env python
"""
Hyper-parameter sweep over a base profile: loss weights, replacement probability,
fusion width q and retrieval number z. One experiment directory per grid point;
results go to <out>/sweep.csv.

    python scripts/sweep_hyperparams.py --config synthetic --param lambda_user
"""

import csv
from pathlib import Path
from typing import Dict, List, Optional

import typer
from rich.console import Console

from genplugin.config_loader import load_config, override
from genplugin.experiment_ops import experiment_paths, write_config
from genplugin.stages import adopt_matching, run_pipeline

console = Console()

P2 = 0.5

# parameter -> (values, value -> config patch)
GRIDS = {
    "lambda_item": ([0.1, 0.3, 0.5, 0.7, 0.9], lambda x: {"loss": {"lambda_item": x}}),
    "lambda_user": ([0.1, 0.3, 0.5, 0.7, 0.85, 1.0], lambda x: {"loss": {"lambda_user": x}}),
    "lambda_kl": ([0.1, 0.3, 0.5, 0.7, 0.9], lambda x: {"loss": {"lambda_kl": x}}),
    # (1 - p1)(1 - p2) with p2 fixed
    "prob": ([0.0, 0.1, 0.2, 0.3, 0.4], lambda x: {"ssg": {"p1": round(1.0 - x / (1.0 - P2), 6), "p2": P2}}),
    "q": ([1, 3, 5, 7, 9], lambda x: {"ssg": {"q": x}}),
    "z": ([2, 5, 10, 15, 20], lambda x: {"retrieval": {"z": x}}),
}


def best_val(log_path: Path) -> Optional[float]:
    if not log_path.exists():
        return None
    with open(log_path, encoding="utf-8") as f:
        values = [float(r["val_loss"]) for r in csv.DictReader(f) if r["val_loss"]]
    return min(values) if values else None


def sweep(config: str, param: str, out: Path, force: bool) -> List[Dict]:
    base = load_config(config)
    values, patch_for = GRIDS[param]
    rows, donors = [], []
    for x in values:
        cfg = override(base, patch_for(x))
        paths = experiment_paths(out / f"{param}={x}")
        write_config(paths, cfg)
        adopt_matching(cfg, paths, donors)
        console.print(f"[bold]{param}={x}[/bold]")
        report = run_pipeline(cfg, paths, force, probe=False)
        row = {"param": param, "value": x, "val_loss": best_val(paths["logs"] / "pretrain.csv")}
        row.update(report["overall"])
        rows.append(row)
        donors.append(paths)
    return rows


def main(
    config: str = typer.Option("synthetic", "--config", "-c"),
    param: List[str] = typer.Option(list(GRIDS), "--param", help="Grid(s) to sweep"),
    out: Path = typer.Option(Path("experiments/sweep"), "--out"),
    force: bool = typer.Option(False, "--force"),
):
    unknown = [p for p in param if p not in GRIDS]
    if unknown:
        console.print(f"[red]Unknown parameter(s): {unknown}. Choose from {list(GRIDS)}[/red]")
        raise typer.Exit(1)

    rows = []
    for p in param:
        rows += sweep(config, p, out, force)

    out.mkdir(parents=True, exist_ok=True)
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    console.print(f"[green]Wrote {out / 'sweep.csv'}[/green]")


if __name__ == "__main__":
    typer.run(main)
