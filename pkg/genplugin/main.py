import csv
import traceback
from functools import wraps
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .config_loader import ExperimentConfig, load_config, resolve_config_path
from .errors import ConfigError, GenPluginError
from .experiment_ops import (
    default_out,
    experiment_paths,
    experiment_summary,
    human_size,
    snapshot_config,
    write_config,
)
from .logger import attach_experiment_log, cli_logger, detach_experiment_log
from .stages import (
    run_data,
    run_evaluate,
    run_finetune,
    run_grid,
    run_ids,
    run_pretrain,
    run_probe,
    run_retrieval,
)

cli = typer.Typer(help="GenPlugin command line", no_args_is_help=True)
console = Console()

ConfigOpt = typer.Option("synthetic", "--config", "-c", help="Config file or profile name under profiles/")
SeedOpt = typer.Option(None, "--seed", help="Override the config seed")
ForceOpt = typer.Option(False, "--force", help="Re-run even if the stage is up-to-date")
OutOpt = typer.Option(None, "--out", help="Experiment directory (default experiments/<name>)")


def _open(config: str, seed: Optional[int], out: Optional[Path]):
    cfg = load_config(config, seed)
    paths = experiment_paths(out or default_out(cfg))
    if seed is None:
        snapshot_config(paths, resolve_config_path(config))
    else:
        # the file on disk does not carry the override
        write_config(paths, cfg)
    return cfg, paths


def _guarded(fn):
    """Exit 0 on success, 1 on user errors, 2 on anything else."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except typer.Exit:
            raise
        except (GenPluginError, ValueError, FileNotFoundError) as e:
            console.print(f"[red]{escape(str(e))}[/red]")
            raise typer.Exit(1)
        except Exception as e:
            cli_logger.error(f"Unexpected error: {e}")
            cli_logger.error(traceback.format_exc())
            console.print(f"[red]Internal error: {escape(str(e))}[/red]")
            raise typer.Exit(2)

    return wrapper


def _stage(stage_fn, config: str, seed: Optional[int], force: bool, out: Optional[Path],
           check=None):
    cfg, paths = _open(config, seed, out)
    if check is not None:
        check(cfg)
    handler = attach_experiment_log(paths["logs"])
    try:
        result = stage_fn(cfg, paths, force)
    finally:
        detach_experiment_log(handler)
    console.print(f"[green]Done.[/green] Experiment: [bold]{paths['root']}[/bold]")
    return cfg, paths, result


def _require_source(source: str):
    def check(cfg: ExperimentConfig):
        if cfg.data.source != source:
            raise ConfigError(f"this command needs data.source: {source} (config has {cfg.data.source})")
    return check


@cli.command("synth-data")
@_guarded
def synth_data(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
               force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Generate the seeded planted-cluster corpus, filter and split it."""
    _stage(run_data, config, seed, force, out, _require_source("synthetic"))


@cli.command()
@_guarded
def ingest(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
           force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Load interaction and metadata JSON-lines files, filter and split them."""
    _stage(run_data, config, seed, force, out, _require_source("amazon"))


@cli.command("build-ids")
@_guarded
def build_ids(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
              force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Extract item embeddings, fit residual codebooks and assign semantic IDs."""
    _stage(run_ids, config, seed, force, out)


@cli.command("pretrain")
@_guarded
def pretrain_cmd(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
                 force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Pre-train encoders and the shared decoder."""
    _stage(run_pretrain, config, seed, force, out)


@cli.command("build-retrieval")
@_guarded
def build_retrieval(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
                    force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Build the BM25 index, collaborative profiles, preference cache and per-user contexts."""
    _stage(run_retrieval, config, seed, force, out)


@cli.command("finetune")
@_guarded
def finetune_cmd(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
                 force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Fine-tune the decoder on retrieval-augmented memory with frozen encoders."""
    _stage(run_finetune, config, seed, force, out)


@cli.command()
@_guarded
def evaluate(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
             force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Generate recommendations for the test targets and report H@k / N@k."""
    _, _, report = _stage(run_evaluate, config, seed, force, out)
    _print_report(report)


@cli.command("probe-bias")
@_guarded
def probe_bias(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
               force: bool = ForceOpt, out: Optional[Path] = OutOpt):
    """Teacher-forced vs free-running token accuracy per level."""
    _, _, probe = _stage(run_probe, config, seed, force, out)
    table = Table(title="Exposure probe")
    table.add_column("Level", justify="right")
    table.add_column("Teacher-forced", justify="right")
    table.add_column("Free-running", justify="right")
    table.add_column("Gap", justify="right")
    for l, (tf, fr, gap) in enumerate(zip(probe["teacher_forced"], probe["free_running"], probe["gap"])):
        table.add_row(str(l + 1), f"{tf:.4f}", f"{fr:.4f}", f"{gap:+.4f}")
    console.print(table)


@cli.command()
@_guarded
def ablate(config: str = ConfigOpt, seed: Optional[int] = SeedOpt,
           force: bool = ForceOpt, out: Optional[Path] = OutOpt,
           grid: str = typer.Option("plugin", "--grid", help="plugin or rar"),
           seeds: int = typer.Option(1, "--seeds", help="Number of consecutive seeds")):
    """Run an ablation grid and print the seed-averaged comparison table."""
    cfg, paths = _open(config, seed, out)
    handler = attach_experiment_log(paths["logs"])
    try:
        rows = run_grid(cfg, paths["root"], grid, seeds, force)
    finally:
        detach_experiment_log(handler)

    csv_path = paths["reports"] / f"ablate_{grid}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    table = Table(title=f"Ablation ({grid}, {seeds} seed{'s' if seeds > 1 else ''})")
    for col in rows[0]:
        table.add_column(col, style="bold cyan" if col == "variant" else None,
                         justify="left" if col == "variant" else "right")
    for row in rows:
        table.add_row(*[_cell(v) for v in row.values()])
    console.print(table)
    console.print(f"[dim]Wrote {csv_path}[/dim]")


@cli.command()
@_guarded
def status(config: str = ConfigOpt, out: Optional[Path] = OutOpt):
    """Show which stages of an experiment are done, stale or missing."""
    cfg = load_config(config)
    paths = experiment_paths(out or default_out(cfg))
    table = Table(title=f"Experiment {paths['root']}")
    table.add_column("Stage", style="bold cyan")
    table.add_column("State")
    table.add_column("Finished")
    table.add_column("Hash")
    table.add_column("Size", justify="right")
    colours = {"up-to-date": "green", "stale": "yellow", "missing": "red"}
    for row in experiment_summary(paths, cfg):
        c = colours[row["state"]]
        table.add_row(row["stage"], f"[{c}]{row['state']}[/{c}]", row["finished_at"], row["hash"],
                      human_size(row["size"]))
    console.print(table)


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _print_report(report: dict) -> None:
    names = list(report["overall"])
    table = Table(title=f"Metrics ({report['n_users']} users)")
    table.add_column("Group", style="bold cyan")
    table.add_column("Users", justify="right")
    for n in names:
        table.add_column(n, justify="right")
    table.add_row("overall", str(report["n_users"]), *[_cell(report["overall"][n]) for n in names])
    for g in ("head", "tail"):
        values = report.get(g) or {}
        table.add_row(g, str(report["group_sizes"][g]), *[_cell(values.get(n)) for n in names])
    for b in report["bins"]:
        values = b["metrics"] or {}
        table.add_row(f"bin {b['lo']:.2f}-{b['hi']:.2f}", str(b["n"]), *[_cell(values.get(n)) for n in names])
    console.print(table)


if __name__ == "__main__":
    cli()
