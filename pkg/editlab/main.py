"""
Command-line entry point for the editing lab.

Subcommands:
- verify: run the stability-bound checkers
- edit: one inversion-and-edit
- sweep: guidance-scale × noise-level grid with trend summary
- multiturn: sequential edits with stability tracking
- drag: drag optimization of the inverted latent

Exit codes: 0 success, 1 bound violation or runtime failure, 2 bad config.
"""

import logging
from pathlib import Path
from typing import Callable, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from editlab import __version__
from editlab.config import configure_logging, get_settings
from editlab.errors import ConfigError, LabError
from editlab.services.experiments import ExperimentRunner
from editlab.utils.config_loader import available_profiles, format_validation_errors, resolve_config

logger = logging.getLogger(__name__)
console = Console(stderr=True)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

app = typer.Typer(
    name="editlab",
    help="Diffusion editing as guided transport on analytic Gaussian mixtures.",
    no_args_is_help=True,
    add_completion=False,
)


# ============================================================================
# SHARED OPTIONS
# ============================================================================

ConfigOption = typer.Option(None, "--config", "-c", help="Experiment config JSON file")
ProfileOption = typer.Option(None, "--profile", "-p", help="Built-in config name")
OutOption = typer.Option(None, "--out", "-o", help="Output directory (default: config, then LAB_OUTPUT_DIR)")
SeedOption = typer.Option(None, "--seed", min=0, max=2**64 - 1, help="Override the experiment seed")
ThreadsOption = typer.Option(None, "--threads", min=1, max=256, help="Worker threads (default: LAB_THREADS)")


def _run(
    command: str,
    action: Callable[[ExperimentRunner], int],
    config: Optional[Path],
    profile: Optional[str],
    out: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
) -> None:
    """Load the config, build a runner, run ``action`` and exit with its code."""
    configure_logging()
    settings = get_settings()
    try:
        experiment = resolve_config(config, profile)
        if seed is not None:
            experiment = experiment.model_copy(update={"seed": seed})
        output_dir = out or Path(experiment.output_dir or settings.output_dir)
        runner = ExperimentRunner(
            experiment,
            output_dir,
            threads=threads or settings.threads,
            record_timing=settings.record_timing,
        )
    except ConfigError as exc:
        console.print(f"[bold red]config error:[/bold red] {exc}")
        for line in exc.errors:
            console.print(f"  - {line}")
        raise typer.Exit(EXIT_CONFIG)
    except ValidationError as exc:
        console.print("[bold red]config error:[/bold red] validation failed")
        for line in format_validation_errors(exc):
            console.print(f"  - {line}")
        raise typer.Exit(EXIT_CONFIG)

    logger.info(f"Running '{command}' for '{experiment.name}' into {output_dir}")
    try:
        code = action(runner)
    except ConfigError as exc:
        console.print(f"[bold red]config error:[/bold red] {exc}")
        raise typer.Exit(EXIT_CONFIG)
    except ValidationError as exc:
        console.print("[bold red]config error:[/bold red] validation failed")
        for line in format_validation_errors(exc):
            console.print(f"  - {line}")
        raise typer.Exit(EXIT_CONFIG)
    except LabError as exc:
        logger.exception(f"'{command}' failed: {exc}")
        raise typer.Exit(EXIT_FAILED)
    except ValueError as exc:
        # DomainError is a LabError and is handled above; plain ValueErrors come from config checks.
        console.print(f"[bold red]config error:[/bold red] {exc}")
        raise typer.Exit(EXIT_CONFIG)
    raise typer.Exit(code)


# ============================================================================
# COMMANDS
# ============================================================================

def _verify(runner: ExperimentRunner) -> int:
    summaries = runner.run_verify()
    table = Table(title="Bound checks")
    for column in ("checker", "satisfied", "min slack", "required", "status"):
        table.add_column(column)
    for s in summaries:
        table.add_row(
            s.name,
            f"{s.satisfied_count}/{s.trials}",
            f"{s.min_slack:.3e}",
            f"{s.required_rate:g}",
            ("[green]passed[/green]" if s.passed else "[red]FAILED[/red]")
            + (" [yellow](trivial)[/yellow]" if s.degenerate else ""),
        )
    console.print(table)
    return EXIT_OK if all(s.passed for s in summaries) else EXIT_FAILED


def _edit(runner: ExperimentRunner) -> int:
    runner.run_edit()
    return EXIT_OK


def _sweep(runner: ExperimentRunner) -> int:
    runner.run_sweep()
    return EXIT_OK


def _multiturn(runner: ExperimentRunner) -> int:
    report = runner.run_multiturn()
    if report.unstable:
        console.print("[yellow]unstable: true[/yellow] (see multiturn_report.json)")
    return EXIT_OK


def _drag(runner: ExperimentRunner) -> int:
    runner.run_drag()
    return EXIT_OK


@app.command()
def verify(
    config: Optional[Path] = ConfigOption,
    profile: Optional[str] = ProfileOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
) -> None:
    """Run the selected stability-bound checkers; exit 1 if any criterion fails."""
    _run("verify", _verify, config, profile, out, seed, threads)


@app.command()
def edit(
    config: Optional[Path] = ConfigOption,
    profile: Optional[str] = ProfileOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
) -> None:
    """Invert the source image and run one guided edit."""
    _run("edit", _edit, config, profile, out, seed, threads)


@app.command()
def sweep(
    config: Optional[Path] = ConfigOption,
    profile: Optional[str] = ProfileOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
) -> None:
    """Evaluate the (guidance scale × noise level × seed) grid."""
    _run("sweep", _sweep, config, profile, out, seed, threads)


@app.command()
def multiturn(
    config: Optional[Path] = ConfigOption,
    profile: Optional[str] = ProfileOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
) -> None:
    """Apply the configured turns in sequence with retry-on-instability."""
    _run("multiturn", _multiturn, config, profile, out, seed, threads)


@app.command()
def drag(
    config: Optional[Path] = ConfigOption,
    profile: Optional[str] = ProfileOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
) -> None:
    """Move handle content to target positions by optimizing the latent."""
    _run("drag", _drag, config, profile, out, seed, threads)


@app.command()
def profiles() -> None:
    """List the built-in experiment configs."""
    for name in available_profiles():
        typer.echo(name)


@app.command()
def version() -> None:
    """Print the package version."""
    typer.echo(__version__)


if __name__ == "__main__":
    app()
