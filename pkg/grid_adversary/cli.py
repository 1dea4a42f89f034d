import contextlib
import pathlib
import tomllib
from collections.abc import Iterator
from typing import Annotated, Any, TypedDict

import pandas as pd
import rich
import typer
from loguru import logger
from pydantic import ValidationError
from rich.table import Table

from grid_adversary.config import ExperimentConfig, ModelKind
from grid_adversary.dataset import load_prepared
from grid_adversary.gangrid import GanGridAborted
from grid_adversary.logging import configure_logging
from grid_adversary.oracle import OracleClient, OracleError, serve
from grid_adversary.pipeline import (
    PipelineStageError,
    analysis_stage,
    gangrid_against,
    gangrid_stage,
    generated_batch_count,
    load_classifiers,
    load_generated,
    merge_traces,
    model_dir,
    pipeline_stage,
    prepare_stage,
    run_pipeline,
    train_stage,
    whitebox_stage,
    write_config_snapshot,
    write_gangrid_results,
)

CONFIG_ERROR_EXIT_CODE = 2
STAGE_FAILURE_EXIT_CODE = 1

REPORT_FILES = {
    "Clean accuracy": "metrics.csv",
    "Post-attack accuracy": "attack_results.csv",
    "Generative attack success": "asr.csv",
    "Campaign estimate": "campaign.csv",
    "Generator compute time": "timing.csv",
    "Feature group importance": "importance.csv",
}


class CLIState(TypedDict):
    verbose: bool
    config: ExperimentConfig


app = typer.Typer(
    name="grid-adversary",
    help="Adversarial attacks against smart grid stability prediction models",
)


cli_state: CLIState = {
    "verbose": False,
    "config": None,  # type: ignore[typeddict-item]
}


def _config_with(**overrides: Any) -> ExperimentConfig:
    try:
        return cli_state["config"].with_overrides(**overrides)
    except ValidationError as exc:
        logger.error(f"Invalid configuration override:\n{exc}")
        raise typer.Exit(code=CONFIG_ERROR_EXIT_CODE) from exc


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        with pipeline_stage(name):
            yield
    except PipelineStageError as exc:
        logger.opt(exception=exc.__cause__).error(str(exc))

        if isinstance(exc.__cause__, GanGridAborted):
            logger.error(f"Traces of {len(exc.__cause__.traces)} episodes were kept before the abort")

        raise typer.Exit(code=STAGE_FAILURE_EXIT_CODE) from exc


@app.callback()
def main(
    config_file: Annotated[
        pathlib.Path | None,
        typer.Option(
            "-c",
            "--config-file",
            help="Path to the experiment configuration file (in TOML format), defaults to the fixture setup",
        ),
    ] = None,
    verbose: Annotated[
        bool,
        typer.Option(
            "--verbose",
            "-v",
            help="Enable DEBUG logs in the output",
            is_eager=True,
        ),
    ] = False,
    log_file: Annotated[
        pathlib.Path | None,
        typer.Option(help="Also write DEBUG logs to this file"),
    ] = None,
) -> None:
    if verbose:
        cli_state["verbose"] = True

    configure_logging(stdout_level="DEBUG" if verbose else "INFO", log_file=str(log_file) if log_file else None)

    if config_file is None:
        logger.info("No configuration file given, using the defaults")
        cli_state["config"] = ExperimentConfig()
        return

    if not config_file.is_file():
        raise typer.BadParameter(f"--config-file: {config_file} is not a file")

    if config_file.suffix != ".toml":
        raise typer.BadParameter(f"--config-file: {config_file} is not a TOML file, must be .toml")

    logger.info(f"Loading configuration from {config_file}")

    try:
        cli_state["config"] = ExperimentConfig.load_from_file(config_file.resolve())
    except (ValidationError, tomllib.TOMLDecodeError) as exc:
        logger.error(f"Invalid configuration in {config_file}:\n{exc}")
        raise typer.Exit(code=CONFIG_ERROR_EXIT_CODE) from exc


OutputDirOption = Annotated[
    pathlib.Path | None,
    typer.Option("--output-dir", "-o", help="Run directory, overrides output_dir from the config"),
]


@app.command()
def prepare_data(
    output_dir: OutputDirOption = None,
    dataset: Annotated[pathlib.Path | None, typer.Option(help="Dataset CSV in the UCI schema")] = None,
    split_seed: Annotated[int | None, typer.Option(help="Seed of the train/validation/test shuffle")] = None,
) -> None:
    """Load, augment, window, split and normalize the dataset"""

    config = _config_with(output_dir=output_dir, **{"dataset.path": dataset, "dataset.split_seed": split_seed})
    write_config_snapshot(config, config.output_dir)

    with _stage("prepare"):
        prepare_stage(config, config.output_dir)


@app.command()
def train(
    output_dir: OutputDirOption = None,
    model: Annotated[
        list[ModelKind] | None,
        typer.Option("--model", "-m", help="Model kinds to train, defaults to models.kinds from the config"),
    ] = None,
    seed: Annotated[int | None, typer.Option(help="Training seed")] = None,
) -> None:
    """Train stability classifiers on a prepared run directory"""

    config = _config_with(output_dir=output_dir, **{"models.seed": seed})

    with _stage("train"):
        prepared = load_prepared(config.output_dir)
        train_stage(config, prepared, config.output_dir, model or None)


@app.command()
def serve_oracle(
    output_dir: OutputDirOption = None,
    model: Annotated[ModelKind, typer.Option("--model", "-m", help="Model kind to serve")] = ModelKind.LSTM,
    model_dir_override: Annotated[
        pathlib.Path | None,
        typer.Option("--model-dir", help="Model artifact directory, defaults to the run directory's model"),
    ] = None,
    host: Annotated[str | None, typer.Option(help="Interface to bind")] = None,
    port: Annotated[int | None, typer.Option(help="Port to bind, 0 picks a free one")] = None,
    labels_only: Annotated[
        bool | None,
        typer.Option("--labels-only/--with-probabilities", help="Answer with labels only or with probabilities too"),
    ] = None,
    simulate_cadence: Annotated[
        bool | None,
        typer.Option(help="Answer at most once per oracle.cadence_seconds, like a grid controller"),
    ] = None,
) -> None:
    """Serve a trained classifier as a labels-only HTTP oracle until interrupted"""

    config = _config_with(
        output_dir=output_dir,
        **{
            "oracle.host": host,
            "oracle.port": port,
            "oracle.labels_only": labels_only,
            "oracle.simulate_cadence": simulate_cadence,
        },
    )
    oracle_config = config.oracle.model_copy(
        update={"model_dir": model_dir_override or config.oracle.model_dir or model_dir(config.output_dir, model)}
    )

    try:
        service = serve(None, oracle_config)
    except OracleError as exc:
        logger.error(str(exc))
        raise typer.Exit(code=STAGE_FAILURE_EXIT_CODE) from exc

    rich.print(f"Oracle listening on [bold]{service.endpoint}[/bold], press Ctrl+C to stop")

    with contextlib.suppress(KeyboardInterrupt):
        service.wait()

    logger.info(f"Oracle answered {service.ledger.snapshot()['total_requests']} requests")


@app.command()
def attack_whitebox(
    output_dir: OutputDirOption = None,
    attack: Annotated[
        list[str] | None,
        typer.Option("--attack", "-a", help="Attacks to run (fgsm, bim, pgd, random_noise)"),
    ] = None,
    model: Annotated[list[ModelKind] | None, typer.Option("--model", "-m", help="Models to attack")] = None,
    epsilon: Annotated[float | None, typer.Option(help="L-infinity budget in normalized units")] = None,
    max_windows: Annotated[int | None, typer.Option(help="Attack only the first N test windows")] = None,
) -> None:
    """Run the white-box reference attacks and the epsilon sweep"""

    config = _config_with(
        output_dir=output_dir,
        **{
            "whitebox.attacks": attack or None,
            "whitebox.models": model or None,
            "whitebox.attack.epsilon": epsilon,
            "whitebox.max_windows": max_windows,
        },
    )

    with _stage("whitebox"):
        prepared = load_prepared(config.output_dir)
        whitebox_stage(config, prepared, load_classifiers(config.output_dir, config.whitebox.models), config.output_dir)


@app.command()
def attack_gangrid(
    output_dir: OutputDirOption = None,
    target: Annotated[
        list[ModelKind] | None,
        typer.Option("--target", "-t", help="Models to attack in-process, defaults to gangrid.targets"),
    ] = None,
    endpoint: Annotated[
        str | None,
        typer.Option(help="Attack a running oracle over HTTP instead of the run directory's models"),
    ] = None,
    episodes: Annotated[int | None, typer.Option(help="Maximum number of episodes")] = None,
    seed: Annotated[int | None, typer.Option(help="Seed of the generator and the latent noise")] = None,
) -> None:
    """Train attack generators through the oracle and measure their attack success rate"""

    config = _config_with(
        output_dir=output_dir,
        **{"gangrid.targets": target or None, "gangrid.rl.episodes": episodes, "gangrid.rl.seed": seed},
    )
    run_dir = config.output_dir

    with _stage("gangrid"):
        prepared = load_prepared(run_dir)

        if endpoint is None:
            gangrid_stage(config, prepared, load_classifiers(run_dir, config.gangrid.targets), run_dir)
            return

        with OracleClient(
            endpoint,
            timeout_seconds=config.oracle.timeout_seconds,
            max_retries=config.oracle.max_retries,
        ) as client:
            remote_model = client.health().get("model", "remote")
            n_batches = generated_batch_count(config, prepared)
            _, summary = gangrid_against(client, remote_model, config, n_batches, prepared.normalization, run_dir)

        merge_traces(run_dir, [remote_model])
        write_gangrid_results([summary], run_dir)


@app.command()
def analyze(
    output_dir: OutputDirOption = None,
    repeats: Annotated[int | None, typer.Option(help="Permutation importance repeats (at least 3)")] = None,
) -> None:
    """Compare generated and real feature distributions and rank feature groups by importance"""

    config = _config_with(output_dir=output_dir, **{"analysis.importance_repeats": repeats})
    run_dir = config.output_dir

    with _stage("analysis"):
        prepared = load_prepared(run_dir)
        classifiers = load_classifiers(
            run_dir, [kind for kind in config.analysis.importance_models if model_dir(run_dir, kind).is_dir()]
        )
        analysis_stage(config, prepared, classifiers, load_generated(run_dir, config.gangrid.targets), run_dir)


@app.command()
def report(output_dir: OutputDirOption = None) -> None:
    """Print the result tables of a run directory"""

    run_dir = _config_with(output_dir=output_dir).output_dir
    found = False

    for title, file_name in REPORT_FILES.items():
        path = run_dir / file_name

        if not path.is_file():
            logger.debug(f"No {file_name} in {run_dir}, skipping")
            continue

        found = True
        frame = pd.read_csv(path)
        table = Table(title=title)

        for column in frame.columns:
            table.add_column(str(column), justify="left" if frame[column].dtype == object else "right")

        for row in frame.itertuples(index=False):
            table.add_row(*(f"{value:.4f}" if isinstance(value, float) else str(value) for value in row))

        rich.print(table)

    if not found:
        logger.error(f"No results found in {run_dir}")
        raise typer.Exit(code=STAGE_FAILURE_EXIT_CODE)


@app.command()
def run(output_dir: OutputDirOption = None) -> None:
    """Run every stage end to end: prepare, train, white-box attacks, the generative attack and analysis"""

    config = _config_with(output_dir=output_dir)

    try:
        run_pipeline(config)
    except PipelineStageError as exc:
        logger.opt(exception=exc.__cause__).error(f"{exc}, partial artifacts kept in {config.output_dir}")
        raise typer.Exit(code=STAGE_FAILURE_EXIT_CODE) from exc
