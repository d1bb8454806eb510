"""Command-line interface: one subcommand per pipeline stage."""

from __future__ import annotations

import sys

import click

from ._container import ContainerError
from .config import ENV_CONFIG, load_config
from .pipeline import (
    RunDir,
    stage_evaluate,
    stage_featurize,
    stage_graph,
    stage_patch,
    stage_pretrain,
    stage_report,
    stage_segment,
    stage_synth,
    stage_train_baseline,
    stage_train_gcn,
)
from .validation import ContractError


def _common(fn):
    fn = click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
        default=None, help=f"Run config YAML (default: ${ENV_CONFIG} or built-ins).",
    )(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(file_okay=False),
                      required=True, help="Run directory for artifacts.")(fn)
    fn = click.option("--resume", is_flag=True,
                      help="Skip outputs that already exist.")(fn)
    return fn


def _run(stage, config_path, seed, out_dir, **kwargs):
    cfg = load_config(config_path, seed_override=seed)
    try:
        return stage(cfg, RunDir(out_dir), **kwargs)
    except (ContractError, ContainerError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc))


@click.group()
def main():
    """Slide grading pipeline: synthetic slides -> patches -> contrastive
    features -> slide graphs -> GCN / tile-bag models -> kappa reports."""


@main.command()
@_common
def synth(config_path, seed, out_dir, resume):
    """Generate the synthetic slide corpus and manifest."""
    written = _run(stage_synth, config_path, seed, out_dir, resume=resume)
    click.echo(f"synth: wrote {len(written)} slide(s)")


@main.command()
@_common
def segment(config_path, seed, out_dir, resume):
    """Compute tissue masks for all slides."""
    done = _run(stage_segment, config_path, seed, out_dir, resume=resume)
    click.echo(f"segment: wrote {len(done)} mask(s)")


@main.command()
@_common
def patch(config_path, seed, out_dir, resume):
    """Tile slides into patch-set files."""
    done = _run(stage_patch, config_path, seed, out_dir, resume=resume)
    click.echo(f"patch: wrote {len(done)} patch set(s)")


@main.command()
@_common
def pretrain(config_path, seed, out_dir, resume):
    """Contrastive pretraining of the patch encoder (train split)."""
    target = _run(stage_pretrain, config_path, seed, out_dir, resume=resume)
    click.echo(f"pretrain: {target}")


@main.command()
@_common
def featurize(config_path, seed, out_dir, resume):
    """Extract per-patch features at both taps."""
    done = _run(stage_featurize, config_path, seed, out_dir, resume=resume)
    click.echo(f"featurize: wrote {len(done)} feature store(s)")


@main.command()
@_common
def graph(config_path, seed, out_dir, resume):
    """Build k-NN slide graphs for both taps."""
    done = _run(stage_graph, config_path, seed, out_dir, resume=resume)
    click.echo(f"graph: wrote {len(done)} graph(s)")


@main.command("train-gcn")
@_common
@click.option("--tap", type=click.Choice(["small", "large", "both"]),
              default="both", help="Which feature tap's model to train.")
def train_gcn(config_path, seed, out_dir, resume, tap):
    """Train the graph classifier(s)."""
    taps = ("small", "large") if tap == "both" else (tap,)
    for t in taps:
        target = _run(stage_train_gcn, config_path, seed, out_dir,
                      tap=t, resume=resume)
        click.echo(f"train-gcn[{t}]: {target}")


@main.command("train-baseline")
@_common
def train_baseline(config_path, seed, out_dir, resume):
    """Train the blue-ratio tile-bag baseline."""
    target = _run(stage_train_baseline, config_path, seed, out_dir, resume=resume)
    click.echo(f"train-baseline: {target}")


@main.command()
@_common
@click.option("--force", is_flag=True,
              help="Evaluate even when input config hashes disagree.")
def evaluate(config_path, seed, out_dir, resume, force):
    """Score the validation split and write report/metrics.txt."""
    del resume
    target = _run(stage_evaluate, config_path, seed, out_dir, force=force)
    click.echo(f"evaluate: {target}")


@main.command()
@_common
def report(config_path, seed, out_dir, resume):
    """Render loss curves and kappa tables to CSV/SVG."""
    del resume
    written = _run(stage_report, config_path, seed, out_dir)
    for path in written:
        click.echo(f"report: {path}")


if __name__ == "__main__":
    sys.exit(main())
