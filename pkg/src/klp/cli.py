"""``klp`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error (bad config/input/preconditions),
2 runtime error.  Logs go to stderr; data only ever goes to files.
"""

from __future__ import annotations

import dataclasses
import logging
import sys

import click

from . import pipeline
from .catalog import AnnotationError, CatalogError
from .config import default_config_text, load_config
from .errors import ConfigError, InputFormatError, KlpError
from .manifest import MissingUpstreamError

_VALIDATION_ERRORS = (
    ConfigError,
    InputFormatError,
    CatalogError,
    AnnotationError,
    MissingUpstreamError,
)


@click.group()
def main() -> None:
    """Generate keyword-landing-page collections from a product catalog."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _apply_overrides(config, workers, seed):
    if workers is not None:
        config = dataclasses.replace(
            config, run=dataclasses.replace(config.run, workers=workers)
        )
    if seed is not None:
        config = dataclasses.replace(
            config, run=dataclasses.replace(config.run, seed=seed)
        )
    return config


def _run(stage: str, config_path: str, force: bool, workers, seed) -> None:
    try:
        config = load_config(config_path)
        config = _apply_overrides(config, workers, seed)
        result = pipeline.run_stage(stage, config, force=force)
    except _VALIDATION_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except KlpError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    status = "skipped (unchanged)" if result.skipped else "done"
    click.echo(f"{stage}: {status} {result.row_counts}", err=True)


def _stage_command(stage: str):
    @click.option("--config", "config_path", required=True, type=click.Path())
    @click.option("--force", is_flag=True, help="Rerun even when inputs are unchanged.")
    @click.option("--workers", type=int, default=None, help="Override [run] workers.")
    @click.option("--seed", type=int, default=None, help="Override [run] seed.")
    def command(config_path: str, force: bool, workers, seed) -> None:
        _run(stage, config_path, force, workers, seed)

    command.__name__ = stage
    command.__doc__ = f"Run the {stage} stage."
    return main.command(name=stage)(command)


for _stage in pipeline.STAGE_ORDER:
    _stage_command(_stage)


@main.group("config")
def config_group() -> None:
    """Inspect configuration."""


@config_group.command("show")
@click.option("--defaults", is_flag=True, help="Print every default value.")
@click.option("--config", "config_path", type=click.Path(), default=None)
def config_show(defaults: bool, config_path) -> None:
    """Print the effective configuration."""
    if defaults or config_path is None:
        click.echo(default_config_text())
        return
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(repr(config))


if __name__ == "__main__":
    main()
