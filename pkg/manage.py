#!/usr/bin/env python3
"""
Class-incremental adapter toolkit management CLI

This script provides the command-line surface for pre-training backbones,
running incremental experiments and studies, fusing adapter checkpoints,
evaluating saved models and exporting or plotting results.
"""

import logging
import os
import sys

import click

from cilkit import create_context
from cilkit.errors import CILError
from cilkit.services.experiment_service import (
    ExperimentService,
    build_backbone,
    load_stream,
    score_stage,
)
from cilkit.services.fusion_service import fuse
from cilkit.services.inference_service import InferenceStrategy, StrategyKind
from cilkit.utils.checkpoint import load_adapter, load_checkpoint, save_adapter, save_backbone
from cilkit.utils.datasets import export_stream, make_synthetic_stream
from cilkit.utils.experiment_config import load_experiment_config
from cilkit.utils.plotting import plot_report

STRATEGY_NAMES = [k.value for k in StrategyKind]


def _fail(error, action):
    """Echo, log and exit with the error's exit code"""
    click.echo(f"❌ {action} failed: {error}", err=True)
    logging.error(f"{action} failed: {error}", exc_info=not isinstance(error, CILError))
    sys.exit(getattr(error, "exit_code", 1))


def _load_config(config_path, seed=None, strategies=(), lambda0=None, orth_mode=None):
    overrides = {
        "seed": seed,
        "strategies": list(strategies) or None,
        "train.lambda0": lambda0,
        "train.orth_mode": orth_mode,
    }
    return load_experiment_config(config_path, overrides)


def experiment_options(func):
    """--config plus the override flags shared by experiment commands"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment YAML file"),
        click.option("--seed", type=int, help="Override the experiment seed"),
        click.option("--strategy", "strategies", multiple=True, type=click.Choice(STRATEGY_NAMES), help="Strategy to evaluate (repeatable)"),
        click.option("--output-dir", type=click.Path(file_okay=False), help="Directory for results"),
        click.option("--lambda0", type=float, help="Initial orthogonal-loss weight"),
        click.option("--orth-mode", type=click.Choice(["up", "down", "both"]), help="Orthogonality variant"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
@click.pass_context
def cli(ctx):
    """Class-incremental adapter toolkit CLI"""
    ctx.obj = create_context()


def _config_path(ctx, config_path):
    return config_path or ctx.obj.get("EXPERIMENT_CONFIG")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment YAML file")
@click.option("--output", type=click.Path(file_okay=False), help="Backbone checkpoint directory")
@click.pass_context
def pretrain(ctx, config_path, output):
    """Pre-train and save a frozen backbone"""
    try:
        cfg = _load_config(_config_path(ctx, config_path))
        cfg.backbone_checkpoint = None
        output = output or os.path.join(ctx.obj.OUTPUT_DIR, "backbone")
        backbone = build_backbone(cfg, progress=ctx.obj.PROGRESS_BARS)
        save_backbone(backbone, output)
        click.echo(f"✅ Backbone saved to {output}")
    except CILError as e:
        _fail(e, "Pre-training")


@cli.command()
@experiment_options
@click.pass_context
def run(ctx, config_path, seed, strategies, output_dir, lambda0, orth_mode):
    """Run a full incremental experiment"""
    try:
        cfg = _load_config(_config_path(ctx, config_path), seed, strategies, lambda0, orth_mode)
        service = ExperimentService(ctx.obj)
        target = output_dir or os.path.join(service.output_dir, cfg.name)
        report = service.run(cfg, output_dir=target)

        click.echo(f"✅ {cfg.name}: {cfg.protocol.label}, {len(report.stages)} stages")
        for name, values in report.summary().items():
            click.echo(f"   {name:<18} A_B={values['final']:.4f}  avg={values['average']:.4f}")
        click.echo(f"📁 Results in {target}")
    except CILError as e:
        _fail(e, "Experiment")


@cli.command("fuse")
@click.argument("adapters", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--output", required=True, type=click.Path(file_okay=False), help="Universal adapter checkpoint directory")
def fuse_command(adapters, output):
    """Fuse adapter checkpoints into a universal adapter"""
    try:
        adapter_sets = [load_adapter(path) for path in adapters]
        save_adapter(fuse(adapter_sets), output)
        click.echo(f"✅ Fused {len(adapter_sets)} adapter sets into {output}")
    except (CILError, ValueError) as e:
        _fail(e, "Fusion")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(file_okay=False), help="Model checkpoint directory")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment YAML file")
@click.option("--strategy", "strategies", multiple=True, type=click.Choice(STRATEGY_NAMES), help="Strategy to evaluate (repeatable)")
@click.option("--stage", type=int, help="Stage to evaluate (default: last trained)")
@click.pass_context
def eval_command(ctx, checkpoint, config_path, strategies, stage):
    """Evaluate a saved model on the configured stream"""
    try:
        cfg = _load_config(_config_path(ctx, config_path), strategies=strategies)
        state = load_checkpoint(checkpoint, cfg.backbone)
        stream = load_stream(cfg)
        stage = stage or state.num_tasks
        result = score_stage(state, stream, stage, [InferenceStrategy.from_name(s) for s in cfg.strategies])

        click.echo(f"✅ Stage {stage} ({result.classes_seen} classes)")
        for name, value in result.accuracies.items():
            click.echo(f"   {name:<18} {value:.4f}")
        click.echo(f"   {'selection':<18} {result.selection_accuracy:.4f}")
    except CILError as e:
        _fail(e, "Evaluation")


@cli.command("export-data")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment YAML file")
@click.option("--seed", type=int, help="Override the experiment seed")
@click.option("--output-dir", required=True, type=click.Path(file_okay=False), help="Directory for train.csv/test.csv")
@click.pass_context
def export_data(ctx, config_path, seed, output_dir):
    """Write the synthetic stream as delimited-text feature files"""
    try:
        cfg = _load_config(_config_path(ctx, config_path), seed)
        stream = make_synthetic_stream(cfg.synthetic, cfg.protocol)
        paths = export_stream(stream, output_dir)
        click.echo(f"✅ Wrote {paths['train']} and {paths['test']}")
    except CILError as e:
        _fail(e, "Export")


@cli.command()
@click.argument("report", type=click.Path(dir_okay=False))
@click.option("--output-dir", type=click.Path(file_okay=False), help="Directory for SVG files")
def plot(report, output_dir):
    """Plot accuracy curves from a report.json"""
    try:
        for path in plot_report(report, output_dir):
            click.echo(f"📈 {path}")
    except CILError as e:
        _fail(e, "Plotting")


def _study(ctx, method, label, config_path, seed, strategies, output_dir, lambda0, orth_mode):
    cfg = _load_config(_config_path(ctx, config_path), seed, strategies, lambda0, orth_mode)
    service = ExperimentService(ctx.obj)
    result = getattr(service, method)(cfg, output_dir=output_dir)
    click.echo(f"✅ {label} for '{cfg.name}' written to {output_dir or os.path.join(service.output_dir, cfg.name)}")
    return result


@cli.command()
@experiment_options
@click.pass_context
def ablation(ctx, **options):
    """Baseline -> entropy selection -> orthogonal loss -> ensemble"""
    try:
        result = _study(ctx, "run_ablation", "Ablation", **options)
        for step in result["steps"]:
            click.echo(f"   {step['step']:<38} A_B={step['final']:.4f}  avg={step['average']:.4f}")
    except CILError as e:
        _fail(e, "Ablation")


@cli.command("orth-variants")
@experiment_options
@click.pass_context
def orth_variants(ctx, **options):
    """Compare UP / DOWN / BOTH orthogonality and no orthogonal loss"""
    try:
        result = _study(ctx, "run_orth_variants", "Orthogonality variants", **options)
        for row in result["variants"]:
            click.echo(f"   {row['variant']:<6} A_B={row['final']:.4f}  gram L1={row['up_gram_l1']:.6f}")
    except CILError as e:
        _fail(e, "Orthogonality study")


@cli.command()
@experiment_options
@click.pass_context
def sweep(ctx, **options):
    """Sweep adapter rank and lambda0 one at a time"""
    try:
        result = _study(ctx, "run_sweep", "Sweep", **options)
        for key in ("rank", "lambda0"):
            for row in result[key]:
                click.echo(f"   {key}={row['value']:<8} avg={row['average']:.4f}")
    except CILError as e:
        _fail(e, "Sweep")


@cli.command()
@experiment_options
@click.pass_context
def pilot(ctx, **options):
    """Entropy/accuracy pilot study"""
    try:
        result = _study(ctx, "run_pilot", "Pilot", **options)
        quartiles = " ".join(f"{q:.3f}" for q in result["quartile_accuracy"])
        click.echo(f"   accuracy by entropy quartile (low -> high): {quartiles}")
        if result["matching_adapter_lowest_entropy"]:
            click.echo("   matching adapter has the lowest entropy on every task")
        else:
            click.echo("⚠️  some task is scored with lower entropy by a foreign adapter")
    except CILError as e:
        _fail(e, "Pilot")


@cli.command("show-config")
@experiment_options
@click.pass_context
def show_config(ctx, config_path, seed, strategies, output_dir, lambda0, orth_mode):
    """Print the resolved experiment configuration as YAML"""
    try:
        cfg = _load_config(_config_path(ctx, config_path), seed, strategies, lambda0, orth_mode)
        click.echo(cfg.to_yaml(), nl=False)
    except CILError as e:
        _fail(e, "Config")


if __name__ == "__main__":
    cli()
