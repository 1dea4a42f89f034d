import json

import numpy as np
import pandas as pd
import pytest
from conftest import fixture_experiment_config

from grid_adversary import pipeline
from grid_adversary.dataset import load_prepared
from grid_adversary.pipeline import PipelineStageError, pipeline_stage, run_pipeline

EXPECTED_FILES = [
    "config.json",
    "prepared.json",
    "windows.npz",
    "models/xgboost/metadata.json",
    "models/xgboost/model.joblib",
    "models/knn/model.joblib",
    "models/lstm/model.pt",
    "metrics.csv",
    "attack_results.csv",
    "sweep.csv",
    "adversarial/lstm_fgsm.csv",
    "adversarial/lstm_random_noise.csv",
    "adversarial/xgboost_random_noise.csv",
    "traces.jsonl",
    "queries.jsonl",
    "asr.csv",
    "campaign.csv",
    "timing.csv",
    "gangrid/lstm/generator.pt",
    "gangrid/lstm/generated.csv",
    "gangrid/xgboost/episodes.csv",
    "distribution_report.csv",
    "distribution_cdf.csv",
    "importance.csv",
]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return run_pipeline(fixture_experiment_config(tmp_path_factory.mktemp("run")))


def test_run_pipeline_writes_every_artifact(run_dir):
    missing = [name for name in EXPECTED_FILES if not (run_dir / name).is_file()]

    assert missing == []
    # no gradients through trees
    assert not (run_dir / "adversarial/xgboost_fgsm.csv").exists()


def test_metrics_table(run_dir):
    metrics = pd.read_csv(run_dir / "metrics.csv")

    assert list(metrics.columns) == [
        "model",
        "repeats",
        "accuracy",
        "accuracy_std",
        "f1",
        "f1_std",
        "tp",
        "tn",
        "fp",
        "fn",
    ]
    assert (metrics["repeats"] == 1).all()
    assert (metrics["accuracy_std"] == 0.0).all()
    assert list(metrics["model"]) == ["xgboost", "knn", "lstm"]
    assert (metrics[["tp", "tn", "fp", "fn"]].sum(axis=1) == 9).all()


def test_attack_table_has_one_row_per_attack(run_dir):
    table = pd.read_csv(run_dir / "attack_results.csv")

    assert list(table["attack"]) == ["baseline", "fgsm", "random_noise", "gangrid"]
    assert list(table.columns) == ["attack", "lstm", "lstm_std", "xgboost", "xgboost_std"]
    assert np.isnan(table.set_index("attack").loc["fgsm", "xgboost"])

    asr = pd.read_csv(run_dir / "asr.csv").set_index("model")
    gangrid_row = table.set_index("attack").loc["gangrid"]
    for model in ["lstm", "xgboost"]:
        assert gangrid_row[model] == pytest.approx(1.0 - asr.loc[model, "asr"])


def test_attack_table_starts_from_the_clean_accuracy(run_dir):
    table = pd.read_csv(run_dir / "attack_results.csv").set_index("attack")
    metrics = pd.read_csv(run_dir / "metrics.csv").set_index("model")

    for model in ["lstm", "xgboost"]:
        assert table.loc["baseline", model] == pytest.approx(metrics.loc[model, "accuracy"])
        # random noise only flips windows that were classified correctly
        assert table.loc["random_noise", model] <= table.loc["baseline", model]


def test_sweep_covers_every_epsilon(run_dir):
    sweep = pd.read_csv(run_dir / "sweep.csv")

    # fgsm on the lstm, random noise on both models
    assert len(sweep) == 3 * 2
    assert sorted(set(sweep["epsilon"])) == [0.1, 0.5]


def test_gangrid_results(run_dir):
    asr = pd.read_csv(run_dir / "asr.csv")
    campaign = pd.read_csv(run_dir / "campaign.csv")

    assert list(asr["model"]) == ["lstm", "xgboost"]
    assert ((asr["asr"] >= 0.0) & (asr["asr"] <= 1.0)).all()
    # 9 test windows in batches of 4
    assert (asr["batches_sent"] == 3).all()
    assert (asr["ledger_batches"] == asr["training_batches"] + asr["probe_batches"] + asr["batches_sent"]).all()
    assert (campaign["estimated_seconds"] == campaign["training_batches"] * 16.0).all()
    assert "compute_seconds" not in campaign
    assert {"convergence_episode", "asr_std", "repeats"} <= set(asr.columns)


def test_compute_time_is_kept_apart_from_the_results(run_dir):
    timing = pd.read_csv(run_dir / "timing.csv")

    assert list(timing.columns) == ["repeat", "model", "compute_seconds"]
    assert list(timing["model"]) == ["lstm", "xgboost"]
    assert (timing["compute_seconds"] >= 0.0).all()


def test_merged_traces_are_tagged_with_the_model(run_dir):
    events = [json.loads(line) for line in (run_dir / "traces.jsonl").read_text().splitlines()]

    assert {event["model"] for event in events} == {"lstm", "xgboost"}
    assert {event["event"] for event in events} <= {"step", "episode_end"}


def test_analysis_outputs(run_dir):
    report = pd.read_csv(run_dir / "distribution_report.csv")
    importance = pd.read_csv(run_dir / "importance.csv")

    assert len(report) == 2 * 12
    assert ((report["ks_statistic"] >= 0.0) & (report["ks_statistic"] <= 1.0)).all()
    assert list(importance["model"]) == ["xgboost"] * 3
    assert sorted(importance["group"]) == ["g", "p", "tau"]


def test_rerun_produces_identical_metrics(run_dir, tmp_path):
    config = fixture_experiment_config(tmp_path)
    prepared = load_prepared(run_dir)

    pipeline.train_stage(config, prepared, tmp_path, list(config.models.kinds))

    assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


def test_failing_stage_keeps_earlier_artifacts(tmp_path, monkeypatch):
    def broken_whitebox(*args, **kwargs):
        raise RuntimeError("out of memory")

    monkeypatch.setattr(pipeline, "whitebox_stage", broken_whitebox)

    with pytest.raises(PipelineStageError, match="out of memory") as exc_info:
        run_pipeline(
            fixture_experiment_config(
                tmp_path,
                models={"kinds": ["knn"]},
                whitebox={"models": ["knn"], "attacks": ["random_noise"]},
                gangrid={"targets": ["knn"]},
            )
        )

    assert exc_info.value.stage == "whitebox"
    assert (tmp_path / "metrics.csv").is_file()
    assert not (tmp_path / "asr.csv").exists()


def test_pipeline_stage_wraps_errors():
    with pytest.raises(PipelineStageError) as exc_info, pipeline_stage("analysis"):
        raise ValueError("boom")

    assert exc_info.value.stage == "analysis"
    assert isinstance(exc_info.value.__cause__, ValueError)
    assert str(exc_info.value) == "Stage 'analysis' failed: boom"


def test_repeats_are_summarized_as_mean_and_std(tmp_path):
    config = fixture_experiment_config(
        tmp_path,
        repeats=2,
        models={"kinds": ["knn"]},
        whitebox={"models": ["knn"], "attacks": ["random_noise"], "sweep_epsilons": [0.5]},
        gangrid={
            "targets": ["knn"],
            "rl": {"episodes": 2, "max_episode_length": 2, "batch_size": 4, "probe_batches": 2, "latent_dim": 8},
        },
        analysis={"importance_repeats": 3, "importance_models": ["knn"], "cdf_points": 11},
    )

    run_dir = run_pipeline(config)

    assert (run_dir / "models/knn/model.joblib").is_file()
    assert (run_dir / "repeats/1/models/knn/model.joblib").is_file()
    assert (run_dir / "repeats/1/gangrid/knn/generated.csv").is_file()

    long_metrics = pd.read_csv(run_dir / "metrics_long.csv")
    metrics = pd.read_csv(run_dir / "metrics.csv").set_index("model")
    assert list(long_metrics["repeat"]) == [0, 1]
    assert metrics.loc["knn", "repeats"] == 2
    assert metrics.loc["knn", "accuracy"] == pytest.approx(long_metrics["accuracy"].mean())
    assert metrics.loc["knn", "accuracy_std"] == pytest.approx(long_metrics["accuracy"].std(ddof=0))

    runs = pd.read_csv(run_dir / "gangrid_runs_long.csv")
    asr = pd.read_csv(run_dir / "asr.csv").set_index("model")
    assert list(runs["repeat"]) == [0, 1]
    assert asr.loc["knn", "asr"] == pytest.approx(runs["asr"].mean())
    assert asr.loc["knn", "asr_std"] == pytest.approx(runs["asr"].std(ddof=0))

    table = pd.read_csv(run_dir / "attack_results.csv")
    assert list(table["attack"]) == ["baseline", "random_noise", "gangrid"]
    assert list(table.columns) == ["attack", "knn", "knn_std"]
    assert len(pd.read_csv(run_dir / "timing.csv")) == 2


def test_rerunning_a_stage_replaces_only_its_repeat(run_dir, tmp_path):
    config = fixture_experiment_config(tmp_path, models={"kinds": ["knn"]})
    prepared = load_prepared(run_dir)

    pipeline.train_stage(config, prepared, tmp_path, repeat=0)
    pipeline.train_stage(config.for_repeat(1), prepared, tmp_path, repeat=1)
    pipeline.train_stage(config, prepared, tmp_path, repeat=0)

    assert list(pd.read_csv(tmp_path / "metrics_long.csv")["repeat"]) == [0, 1]
    assert pd.read_csv(tmp_path / "metrics.csv").loc[0, "repeats"] == 2
