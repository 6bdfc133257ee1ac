"""Command-line entry point: one subcommand per pipeline stage."""

import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import click

from . import pipeline
from .config import PipelineConfig, apply_overrides, load_config
from .errors import DeclineForgeError
from .observability import configure_logging

logger = logging.getLogger(__name__)


def common_options(fn: Callable) -> Callable:
    fn = click.option("--k", type=int, default=None, help="Number of trajectory clusters.")(fn)
    fn = click.option("--workspace", type=click.Path(file_okay=False, path_type=Path), default=None,
                      help="Workspace directory (overrides paths.workspace).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed; section seeds use fixed offsets.")(fn)
    fn = click.option("--force", is_flag=True, help="Overwrite completed stages and configuration mismatches.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                      help="JSON configuration file; built-in defaults when omitted.")(fn)
    return fn


def build_context(config_path: Optional[Path], force: bool, seed: Optional[int],
                  workspace: Optional[Path], k: Optional[int]) -> pipeline.Context:
    cfg = load_config(config_path) if config_path is not None else PipelineConfig()
    cfg = apply_overrides(cfg, seed=seed, workspace=workspace, k=k)
    return pipeline.Context(cfg=cfg, force=force)


def _invoke(action: Callable[[pipeline.Context], object], **options):
    try:
        ctx = build_context(**options)
        return action(ctx)
    except DeclineForgeError as exc:
        stage = getattr(exc, "failed_stage", None)
        prefix = f"{exc.__class__.__name__} in stage '{stage}'" if stage else exc.__class__.__name__
        click.echo(f"error: {prefix}: {exc}", err=True)
        sys.exit(exc.exit_code)


@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.version_option(package_name="declineforge")
def cli(log_level: str):
    """Synthetic cognitive-decline cohorts, trajectory clustering and progression classifiers."""
    configure_logging(log_level)


def _stage_command(name: str, help_text: str):
    command = pipeline.COMMANDS[name]

    @common_options
    def run(**options):
        _invoke(command, **options)
        click.echo(f"{name}: done")

    run.__doc__ = help_text
    cli.command(name=name)(run)


_stage_command("synth", "Generate trajectories, tabular features and volumes.")
_stage_command("cluster", "Cluster CDR-SB trajectories with DTW k-means and assign progression labels.")
_stage_command("split", "Draw the stratified train/test split.")
_stage_command("pretrain", "Pretrain the ViT autoencoder on augmented volumes.")
_stage_command("embed", "Extract pooled ViT embeddings for every subject.")
_stage_command("evaluate", "Train every classifier route and score held-out AUCs.")


@cli.command("run-all")
@common_options
def run_all(**options):
    """Run every stage that is not already complete."""
    ran = _invoke(pipeline.cmd_run_all, **options)
    click.echo(f"ran: {', '.join(ran)}" if ran else "up to date")


@cli.command()
@common_options
def report(**options):
    """Print the AUC comparison tables from a completed evaluation."""
    click.echo(_invoke(pipeline.cmd_report, **options))


def main():
    cli(prog_name="declineforge")


if __name__ == "__main__":
    main()
