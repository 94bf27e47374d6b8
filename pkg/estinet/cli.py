import dataclasses
import json
import logging
import os

import click

from .checkpoints import load_model_checkpoints
from .config import ConfigError, ExperimentConfigParser, ModelKind
from .data_utils.utils import atomic_write
from .estinet import DivergenceError, EstiNet
from .experiments import (
    build_datamodule,
    build_task,
    evaluate_run,
    generate_data,
    gradcheck_report,
    reproduce_table,
    run_experiment,
    write_efficiency_report,
)
from .helpers import set_random_seeds
from .rl import compare_learning_efficiency, load_run_log
from .tasks import TASKS

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _load_config(kwargs):
    try:
        with open(kwargs["config"], "r", encoding="utf-8") as config_file:
            config = ExperimentConfigParser.from_json(config_file)
    except ConfigError as err:
        raise click.UsageError(f"Invalid config {kwargs['config']}: {err}")
    if kwargs.get("out"):
        config = dataclasses.replace(config, output_dir=kwargs["out"])
    logger.info(f"Finished reading {kwargs['config']} (hash {config.config_hash()[:12]})")
    return config


def _exit_on_divergence(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DivergenceError as err:
        logger.error(f"Training diverged: {err} {err.diagnostics}")
        raise click.exceptions.Exit(1)


@click.group()
def cli():
    """Train networks that call exact black-box functions, by estimating and replacing them."""


@cli.command()
@click.option("--config", type=str, required=True, help="Path of the experiment JSON config")
@click.option("--seed", type=int, help="Seed of the first repeat. Defaults to training.seed")
@click.option("--out", type=str, help="Output directory. Overrides the config's output_dir")
@click.option("--data_dir", type=str, help="MNIST directory. Defaults to $ESTINET_DATA_DIR")
@click.option("--download", is_flag=True, help="Download MNIST when it is missing")
def train(**kwargs):
    """Run the configured experiment and write run records, logs and checkpoints."""
    config = _load_config(kwargs)
    records = _exit_on_divergence(
        run_experiment,
        config,
        seed=kwargs["seed"],
        data_dir=kwargs["data_dir"],
        download=kwargs["download"],
    )
    for record in records:
        click.echo(record.artifacts["run_record"])
    return 0


@cli.command("eval")
@click.option("--config", type=str, required=True, help="Path of the experiment JSON config")
@click.option(
    "--checkpoint_dir",
    type=str,
    required=True,
    help="Directory holding extractor.pt and estimator.pt",
)
@click.option("--seed", type=int, help="Random seed. Defaults to training.seed")
@click.option("--out", type=str, help="Path of the metrics JSON file to write")
@click.option("--data_dir", type=str, help="MNIST directory. Defaults to $ESTINET_DATA_DIR")
@click.option("--download", is_flag=True, help="Download MNIST when it is missing")
def eval_command(**kwargs):
    """Evaluate saved extractor/estimator checkpoints in every configured mode."""
    config = _load_config({**kwargs, "out": None})
    if config.model == ModelKind.RL:
        raise click.UsageError("eval works on estinet and baseline models")
    if kwargs["seed"] is not None:
        config = config.with_seed(kwargs["seed"])
    set_random_seeds(config.training.seed)
    task = build_task(config, kwargs["data_dir"], kwargs["download"])
    datamodule = build_datamodule(config, task)
    model = load_model_checkpoints(EstiNet(task, config.training), kwargs["checkpoint_dir"])
    metrics = evaluate_run(model, datamodule, config)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if kwargs["out"]:
        atomic_write(kwargs["out"], lambda f: f.write(text))
        logger.info(f"Wrote metrics to {kwargs['out']}")
    click.echo(text)
    return 0


@cli.command("gen-data")
@click.option("--task", type=click.Choice(sorted(TASKS)), required=True, help="Task to generate")
@click.option("--n", type=int, required=True, help="Number of samples")
@click.option("--seed", type=int, default=0, help="Generation seed")
@click.option("--out", type=str, required=True, help="Output directory")
@click.option("--split", type=str, default="train", help="Split to generate: train, valid or test")
@click.option("--n_test", type=int, help="Also write this many test samples (seed + 1)")
@click.option("--k", type=int, help="Sequence length for the image tasks")
@click.option("--audit", is_flag=True, help="Re-derive every label through the black box")
@click.option("--data_dir", type=str, help="MNIST directory. Defaults to $ESTINET_DATA_DIR")
@click.option("--download", is_flag=True, help="Download MNIST when it is missing")
def gen_data(**kwargs):
    """Write a generated dataset as JSON lines."""
    try:
        paths = generate_data(
            kwargs["task"],
            kwargs["n"],
            kwargs["seed"],
            kwargs["out"],
            split=kwargs["split"],
            audit=kwargs["audit"],
            n_test=kwargs["n_test"],
            k=kwargs["k"],
            data_dir=kwargs["data_dir"],
            download=kwargs["download"],
        )
    except ValueError as err:
        raise click.UsageError(str(err))
    for path in paths:
        click.echo(path)
    return 0


@cli.command()
@click.option("--tolerance", type=float, default=1e-4, help="Maximum relative error")
@click.option("--seed", type=int, default=0, help="Seed of the random inputs")
@click.option("--trials", type=int, help="Random inputs per check. Defaults to each check's own")
def gradcheck(**kwargs):
    """Compare analytic gradients with central differences for every op, loss and layer."""
    results = gradcheck_report(
        tolerance=kwargs["tolerance"], seed=kwargs["seed"], trials=kwargs["trials"]
    )
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        click.echo(f"{r.name:<{width}}  {r.max_relative_error:.3e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"{len(failed)} gradient checks failed: {', '.join(failed)}", err=True)
        raise click.exceptions.Exit(1)
    click.echo(f"All {len(results)} gradient checks passed")
    return 0


@cli.command()
@click.option(
    "--table", "table_id", type=click.IntRange(1, 4), required=True, help="Result table, 1-4"
)
@click.option(
    "--scale",
    type=click.Choice(["desk", "full"]),
    default="desk",
    help="`desk` shrinks data and epochs to fit a CPU",
)
@click.option("--out", type=str, default=".", help="Output directory")
@click.option("--data_dir", type=str, help="MNIST directory. Defaults to $ESTINET_DATA_DIR")
@click.option("--download", is_flag=True, help="Download MNIST when it is missing")
def reproduce(**kwargs):
    """Run the experiments behind a result table and write it as CSV."""
    path = _exit_on_divergence(
        reproduce_table,
        kwargs["table_id"],
        scale=kwargs["scale"],
        out=kwargs["out"],
        data_dir=kwargs["data_dir"],
        download=kwargs["download"],
    )
    click.echo(path)
    return 0


@cli.command("compare-rl")
@click.option("--estinet_log", type=str, required=True, help="EstiNet extractor accuracy log")
@click.option("--rl_log", type=str, required=True, help="RL agent run log")
@click.option("--threshold", type=float, default=0.9, help="Accuracy threshold")
@click.option("--out", type=str, required=True, help="Path of the CSV report")
def compare_rl(**kwargs):
    """Updates-to-threshold of EstiNet vs the actor-critic agent, from persisted run logs."""
    for key in ("estinet_log", "rl_log"):
        if not os.path.exists(kwargs[key]):
            raise click.UsageError(f"Missing run log {kwargs[key]}")
    try:
        report = compare_learning_efficiency(
            load_run_log(kwargs["estinet_log"]),
            load_run_log(kwargs["rl_log"]),
            threshold=kwargs["threshold"],
        )
    except ValueError as err:
        raise click.UsageError(str(err))
    click.echo(write_efficiency_report(report, kwargs["out"]))
    return 0
