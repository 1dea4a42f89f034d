import contextlib
import json
import math
import pathlib
from collections.abc import Iterator

import numpy as np
import pandas as pd
from loguru import logger

from grid_adversary.analysis import (
    distribution_compare,
    importance_to_frame,
    permutation_importance,
)
from grid_adversary.config import ExperimentConfig, ModelKind
from grid_adversary.dataset import (
    NormalizationParams,
    PreparedData,
    invert_normalizer,
    prepare_dataset,
    save_prepared,
    stack_windows,
)
from grid_adversary.gangrid import (
    Oracle,
    estimate_campaign_time,
    evaluate_generator,
    generated_to_frame,
    init_generator,
    save_generator,
    train_gangrid,
    traces_to_frame,
)
from grid_adversary.models import (
    GradientsUnavailableError,
    StabilityClassifier,
    evaluate,
    load_classifier,
    save_classifier,
    train_baseline,
    train_recurrent,
)
from grid_adversary.oracle import LocalOracle, QueryLedger
from grid_adversary.utils import append_jsonl, get_output_path, write_json
from grid_adversary.whitebox import (
    GRADIENT_ATTACKS,
    adversarial_to_frame,
    epsilon_sweep,
    run_attack,
    sweep_to_frame,
)

CONFIG_SNAPSHOT_NAME = "config.json"
MODELS_DIR_NAME = "models"
GANGRID_DIR_NAME = "gangrid"
REPEATS_DIR_NAME = "repeats"
GENERATED_ARRAYS_NAME = "generated.npz"

BASELINE_ATTACK_NAME = "baseline"
GANGRID_ATTACK_NAME = "gangrid"

# one row per repeat, the summary tables are rebuilt from these
METRICS_RESULTS_NAME = "metrics_long.csv"
WHITEBOX_RESULTS_NAME = "attack_results_long.csv"
GANGRID_RESULTS_NAME = "gangrid_results_long.csv"
GANGRID_RUNS_NAME = "gangrid_runs_long.csv"
TIMING_NAME = "timing.csv"
LONG_RESULT_NAMES = (METRICS_RESULTS_NAME, WHITEBOX_RESULTS_NAME, GANGRID_RESULTS_NAME, GANGRID_RUNS_NAME, TIMING_NAME)

METRIC_COLUMNS = ["accuracy", "f1", "tp", "tn", "fp", "fn"]
ASR_COLUMNS = [
    "episodes",
    "convergence_episode",
    "converged",
    "training_batches",
    "probe_batches",
    "batches_sent",
    "batches_fooling",
    "asr",
    "window_stable_rate",
    "ledger_batches",
]
CAMPAIGN_COLUMNS = [
    "training_batches",
    "cadence_seconds",
    "estimated_seconds",
    "estimated_minutes",
]


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"Stage '{stage}' failed: {message}")
        self.stage = stage


@contextlib.contextmanager
def pipeline_stage(name: str) -> Iterator[None]:
    logger.info(f"Stage '{name}' started")

    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, str(exc)) from exc

    logger.info(f"Stage '{name}' finished")


def write_config_snapshot(config: ExperimentConfig, run_dir: pathlib.Path) -> pathlib.Path:
    path = get_output_path(run_dir, CONFIG_SNAPSHOT_NAME)
    write_json(path, config.model_dump(mode="json"))

    return path


def repeat_dir(run_dir: pathlib.Path, repeat: int) -> pathlib.Path:
    # the first repeat owns the top level so single runs keep a flat layout
    return run_dir if repeat == 0 else run_dir / REPEATS_DIR_NAME / str(repeat)


def model_dir(run_dir: pathlib.Path, kind: ModelKind, repeat: int = 0) -> pathlib.Path:
    return repeat_dir(run_dir, repeat) / MODELS_DIR_NAME / str(kind)


def clear_results(run_dir: pathlib.Path) -> None:
    for name in LONG_RESULT_NAMES:
        (run_dir / name).unlink(missing_ok=True)


def replace_repeat_rows(path: pathlib.Path, frame: pd.DataFrame, repeat: int) -> pd.DataFrame:
    frame = frame.copy()
    frame.insert(0, "repeat", repeat)

    if path.is_file():
        kept = pd.read_csv(path)
        kept = kept[kept["repeat"] != repeat]

        if frame.empty:
            frame = kept
        elif not kept.empty:
            frame = pd.concat([kept, frame], ignore_index=True).sort_values("repeat", kind="stable")

    frame.to_csv(get_output_path(path.parent, path.name), index=False)

    return frame


def summarize_repeats(long_results: pd.DataFrame, columns: list[str], spread: set[str]) -> pd.DataFrame:
    """Mean of every column per model over the repeats, with a population ``<column>_std`` for ``spread``."""

    grouped = long_results.groupby("model", sort=False)
    table = pd.DataFrame({"repeats": grouped.size()})

    for column in columns:
        if column not in long_results:
            continue

        table[column] = grouped[column].mean()

        if column in spread:
            table[f"{column}_std"] = grouped[column].std(ddof=0)

    return table.rename_axis("model").reset_index()


def prepare_stage(config: ExperimentConfig, run_dir: pathlib.Path) -> PreparedData:
    prepared = prepare_dataset(config.dataset)
    save_prepared(prepared, run_dir)

    split = prepared.split
    logger.info(
        f"Prepared {len(split.train)} train, {len(split.validation)} validation "
        f"and {len(split.test)} test windows from {prepared.dataset_path}"
    )

    return prepared


def train_stage(
    config: ExperimentConfig,
    prepared: PreparedData,
    run_dir: pathlib.Path,
    kinds: list[ModelKind] | None = None,
    repeat: int = 0,
) -> dict[ModelKind, StabilityClassifier]:
    classifiers: dict[ModelKind, StabilityClassifier] = {}
    rows = []

    for kind in kinds or config.models.kinds:
        if kind is ModelKind.LSTM:
            classifier: StabilityClassifier = train_recurrent(
                prepared.split,
                config.models.recurrent,
                config.models.seed,
                normalization=prepared.normalization,
            )
        else:
            classifier = train_baseline(
                kind,
                prepared.split,
                config.models.hyperparameters_for(kind),
                seed=config.models.seed,
                normalization=prepared.normalization,
            )

        report = evaluate(classifier, prepared.split.test)
        save_classifier(
            classifier,
            model_dir(run_dir, kind, repeat),
            metrics={"accuracy": report.accuracy, "f1": report.f1},
        )

        logger.info(f"{kind}: test accuracy {report.accuracy:.4f}, F1 {report.f1:.4f}")

        classifiers[kind] = classifier
        rows.append({"model": str(kind), **report.model_dump(exclude={"support"})})

    replace_repeat_rows(run_dir / METRICS_RESULTS_NAME, pd.DataFrame(rows, columns=["model", *METRIC_COLUMNS]), repeat)
    write_metrics_table(run_dir)

    return classifiers


def write_metrics_table(run_dir: pathlib.Path) -> pathlib.Path:
    table = summarize_repeats(pd.read_csv(run_dir / METRICS_RESULTS_NAME), METRIC_COLUMNS, {"accuracy", "f1"})
    path = get_output_path(run_dir, "metrics.csv")
    table.to_csv(path, index=False)

    return path


def load_classifiers(run_dir: pathlib.Path, kinds: list[ModelKind]) -> dict[ModelKind, StabilityClassifier]:
    return {kind: load_classifier(model_dir(run_dir, kind)) for kind in kinds}


def _test_arrays(prepared: PreparedData, max_windows: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    windows, labels = stack_windows(prepared.split.test)

    if max_windows is not None:
        windows, labels = windows[:max_windows], labels[:max_windows]

    return windows, labels


def whitebox_stage(
    config: ExperimentConfig,
    prepared: PreparedData,
    classifiers: dict[ModelKind, StabilityClassifier],
    run_dir: pathlib.Path,
    repeat: int = 0,
) -> pd.DataFrame:
    windows, labels = _test_arrays(prepared, config.whitebox.max_windows)
    attack_config = config.whitebox.attack
    artifacts_dir = repeat_dir(run_dir, repeat)

    results = []
    sweep_points = []

    for kind in config.whitebox.models:
        classifier = classifiers[kind]

        for attack in config.whitebox.attacks:
            if attack in GRADIENT_ATTACKS and not classifier.differentiable:
                logger.info(f"Skipping {attack} against {kind}: gradients unavailable")
                continue

            try:
                batch = run_attack(attack, classifier, windows, labels, attack_config)
            except GradientsUnavailableError as exc:
                logger.warning(f"Skipping {attack} against {kind}: {exc}")
                continue

            results.append(
                {"attack": attack, "model": str(kind), "epsilon": batch.epsilon, "accuracy": batch.accuracy}
            )
            adversarial_to_frame(batch, prepared.normalization).to_csv(
                get_output_path(artifacts_dir, f"adversarial/{kind}_{attack}.csv"), index=False
            )

            if config.whitebox.sweep_epsilons:
                sweep_points.extend(
                    epsilon_sweep(classifier, windows, labels, attack, config.whitebox.sweep_epsilons, attack_config)
                )

    long_results = pd.DataFrame(results, columns=["attack", "model", "epsilon", "accuracy"])
    replace_repeat_rows(run_dir / WHITEBOX_RESULTS_NAME, long_results, repeat)
    sweep_to_frame(sweep_points).to_csv(get_output_path(artifacts_dir, "sweep.csv"), index=False)
    write_attack_table(run_dir)

    return long_results


def write_attack_table(run_dir: pathlib.Path) -> pathlib.Path:
    """One row per attack, led by the clean accuracy, with a mean and a std column per attacked model."""

    frames = [
        pd.read_csv(path)
        for path in (run_dir / WHITEBOX_RESULTS_NAME, run_dir / GANGRID_RESULTS_NAME)
        if path.is_file()
    ]
    frames = [frame for frame in frames if not frame.empty]
    path = get_output_path(run_dir, "attack_results.csv")

    if not frames:
        pd.DataFrame(columns=["attack"]).to_csv(path, index=False)
        return path

    attack_results = pd.concat(frames, ignore_index=True)
    model_order = list(dict.fromkeys(attack_results["model"]))

    metrics_path = run_dir / METRICS_RESULTS_NAME
    if metrics_path.is_file():
        metrics = pd.read_csv(metrics_path)
        baseline = metrics[metrics["model"].isin(model_order)][["repeat", "model", "accuracy"]]
        attack_results = pd.concat([baseline.assign(attack=BASELINE_ATTACK_NAME), attack_results], ignore_index=True)

    attack_order = list(dict.fromkeys(attack_results["attack"]))
    grouped = attack_results.groupby(["attack", "model"], sort=False)["accuracy"]
    mean = grouped.mean().unstack("model")
    std = grouped.std(ddof=0).unstack("model")

    table = pd.DataFrame({"attack": attack_order})
    for model in model_order:
        table[model] = mean[model].reindex(attack_order).to_numpy()
        table[f"{model}_std"] = std[model].reindex(attack_order).to_numpy()

    table.to_csv(path, index=False)

    return path


def generated_batch_count(config: ExperimentConfig, prepared: PreparedData) -> int:
    if config.gangrid.generated_batches is not None:
        return config.gangrid.generated_batches

    return max(1, math.ceil(len(prepared.split.test) / config.gangrid.rl.batch_size))


def gangrid_against(
    oracle: Oracle,
    target: str,
    config: ExperimentConfig,
    n_batches: int,
    normalization: NormalizationParams,
    run_dir: pathlib.Path,
) -> tuple[list[np.ndarray], dict[str, object]]:
    rl = config.gangrid.rl
    target_dir = run_dir / GANGRID_DIR_NAME / target
    trace_path = target_dir / "traces.jsonl"
    trace_path.unlink(missing_ok=True)

    generator = init_generator(rl.latent_dim, rl.window_size, rl.seed)
    generator, traces = train_gangrid(generator, oracle, rl, trace_path=trace_path)
    save_generator(generator, target_dir)
    traces_to_frame(traces).to_csv(get_output_path(target_dir, "episodes.csv"), index=False)

    asr, batches = evaluate_generator(generator, oracle, n_batches, config.gangrid.generation_seed, rl.batch_size)
    np.savez_compressed(get_output_path(target_dir, GENERATED_ARRAYS_NAME), windows=np.concatenate(batches))
    generated_to_frame(batches, normalization).to_csv(target_dir / "generated.csv", index=False)

    estimate = estimate_campaign_time(traces, config.gangrid.cadence_seconds)
    converged = traces[-1].converged

    logger.info(
        f"Generative attack against {target}: ASR {asr.asr:.4f} after {estimate.episodes} episodes and "
        f"{estimate.batches} training batches, about {estimate.estimated_minutes:.1f} minutes at one query per "
        f"{estimate.cadence_seconds:g}s ({estimate.compute_seconds:.1f}s of local compute)"
    )

    summary: dict[str, object] = {
        "model": target,
        "episodes": estimate.episodes,
        "convergence_episode": estimate.episodes if converged else np.nan,
        "converged": converged,
        "training_batches": estimate.batches,
        "probe_batches": estimate.probe_batches,
        **asr.model_dump(),
        "cadence_seconds": estimate.cadence_seconds,
        "estimated_seconds": estimate.estimated_seconds,
        "estimated_minutes": estimate.estimated_minutes,
        "compute_seconds": estimate.compute_seconds,
    }

    return batches, summary


def merge_traces(run_dir: pathlib.Path, targets: list[str]) -> pathlib.Path:
    merged_path = run_dir / "traces.jsonl"
    merged_path.unlink(missing_ok=True)

    for target in targets:
        with (run_dir / GANGRID_DIR_NAME / target / "traces.jsonl").open(encoding="utf-8") as f:
            for line in f:
                append_jsonl(merged_path, {"model": target, **json.loads(line)})

    return merged_path


def gangrid_stage(
    config: ExperimentConfig,
    prepared: PreparedData,
    classifiers: dict[ModelKind, StabilityClassifier],
    run_dir: pathlib.Path,
    repeat: int = 0,
) -> dict[ModelKind, list[np.ndarray]]:
    n_batches = generated_batch_count(config, prepared)
    artifacts_dir = repeat_dir(run_dir, repeat)
    ledger_path = artifacts_dir / "queries.jsonl"
    ledger_path.unlink(missing_ok=True)
    ledger = QueryLedger(ledger_path)

    generated: dict[ModelKind, list[np.ndarray]] = {}
    summaries = []

    for target in config.gangrid.targets:
        oracle = LocalOracle(
            classifiers[target],
            labels_only=config.oracle.labels_only,
            ledger=ledger,
            client_id=f"gangrid-{target}",
        )
        batches, summary = gangrid_against(
            oracle, str(target), config, n_batches, prepared.normalization, artifacts_dir
        )
        summary["ledger_batches"] = ledger.snapshot()["requests_per_client"][oracle.client_id]

        generated[target] = batches
        summaries.append(summary)

    merge_traces(artifacts_dir, [str(target) for target in config.gangrid.targets])
    write_gangrid_results(summaries, run_dir, repeat)

    return generated


def write_gangrid_results(summaries: list[dict[str, object]], run_dir: pathlib.Path, repeat: int = 0) -> None:
    frame = pd.DataFrame(summaries)

    # wall-clock time differs between reruns, keep it out of the reproducible tables
    replace_repeat_rows(run_dir / TIMING_NAME, frame[["model", "compute_seconds"]], repeat)
    runs = replace_repeat_rows(run_dir / GANGRID_RUNS_NAME, frame.drop(columns="compute_seconds"), repeat)

    summarize_repeats(runs, ASR_COLUMNS, {"asr", "window_stable_rate"}).to_csv(
        get_output_path(run_dir, "asr.csv"), index=False
    )
    summarize_repeats(runs, CAMPAIGN_COLUMNS, set()).to_csv(get_output_path(run_dir, "campaign.csv"), index=False)

    # residual accuracy on generated data: the share of batches the oracle did not accept as stable
    replace_repeat_rows(
        run_dir / GANGRID_RESULTS_NAME,
        pd.DataFrame(
            {
                "attack": GANGRID_ATTACK_NAME,
                "model": frame["model"],
                "epsilon": np.nan,
                "accuracy": 1.0 - frame["asr"],
            }
        ),
        repeat,
    )
    write_attack_table(run_dir)


def load_generated(run_dir: pathlib.Path, targets: list[ModelKind]) -> dict[ModelKind, np.ndarray]:
    generated = {}

    for target in targets:
        path = run_dir / GANGRID_DIR_NAME / str(target) / GENERATED_ARRAYS_NAME

        if not path.is_file():
            raise FileNotFoundError(f"No generated windows for {target} at {path}, run attack-gangrid first")

        with np.load(path) as arrays:
            generated[target] = arrays["windows"]

    return generated


def analysis_stage(
    config: ExperimentConfig,
    prepared: PreparedData,
    classifiers: dict[ModelKind, StabilityClassifier],
    generated: dict[ModelKind, np.ndarray],
    run_dir: pathlib.Path,
) -> None:
    test_windows, test_labels = _test_arrays(prepared)
    real_rows = invert_normalizer(prepared.normalization, test_windows.reshape(-1, test_windows.shape[-1]))

    reports = []
    cdfs = []
    for target, windows in generated.items():
        generated_rows = invert_normalizer(prepared.normalization, windows.reshape(-1, windows.shape[-1]))
        report = distribution_compare(real_rows, generated_rows, config.analysis.cdf_points)

        reports.append(report.to_frame().assign(model=str(target)))
        cdfs.append(report.cdf_frame().assign(model=str(target)))

    if reports:
        pd.concat(reports, ignore_index=True).to_csv(get_output_path(run_dir, "distribution_report.csv"), index=False)
        pd.concat(cdfs, ignore_index=True).to_csv(get_output_path(run_dir, "distribution_cdf.csv"), index=False)

    importances = []
    for kind in config.analysis.importance_models:
        if kind not in classifiers:
            logger.warning(f"Skipping permutation importance for {kind}: model not trained in this run")
            continue

        ranked = permutation_importance(
            classifiers[kind],
            test_windows,
            test_labels,
            config.analysis.importance_repeats,
            config.analysis.importance_seed,
        )
        importances.append(importance_to_frame(ranked, str(kind)))

    if importances:
        pd.concat(importances, ignore_index=True).to_csv(get_output_path(run_dir, "importance.csv"), index=False)


def run_pipeline(config: ExperimentConfig) -> pathlib.Path:
    run_dir = config.output_dir
    run_dir.mkdir(parents=True, exist_ok=True)

    logger.info(f"Running the full experiment into {run_dir} ({config.repeats} repeats)")

    write_config_snapshot(config, run_dir)
    clear_results(run_dir)

    with pipeline_stage("prepare"):
        prepared = prepare_stage(config, run_dir)

    required = list(dict.fromkeys([*config.models.kinds, *config.whitebox.models, *config.gangrid.targets]))
    classifiers: dict[ModelKind, StabilityClassifier] = {}
    generated: dict[ModelKind, list[np.ndarray]] = {}

    for repeat in range(config.repeats):
        repeat_config = config.for_repeat(repeat)

        if config.repeats > 1:
            logger.info(f"Repeat {repeat + 1}/{config.repeats}, models seeded with {repeat_config.models.seed}")

        with pipeline_stage("train"):
            trained = train_stage(repeat_config, prepared, run_dir, required, repeat)

        with pipeline_stage("whitebox"):
            whitebox_stage(repeat_config, prepared, trained, run_dir, repeat)

        with pipeline_stage("gangrid"):
            repeat_generated = gangrid_stage(repeat_config, prepared, trained, run_dir, repeat)

        if repeat == 0:
            classifiers, generated = trained, repeat_generated

    with pipeline_stage("analysis"):
        analysis_stage(
            config,
            prepared,
            classifiers,
            {target: np.concatenate(batches) for target, batches in generated.items()},
            run_dir,
        )

    logger.info(f"Experiment finished, results in {run_dir}")

    return run_dir
