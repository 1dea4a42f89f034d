import pathlib
import sys
from typing import Any

import numpy as np
import pytest
from loguru import logger
from scipy.special import expit

from grid_adversary.config import FIXTURE_DATASET_PATH, DatasetConfig, ExperimentConfig, RecurrentNetConfig
from grid_adversary.dataset import N_FEATURES, PreparedData, prepare_dataset, stack_windows
from grid_adversary.models import (
    BaselineClassifier,
    RecurrentClassifier,
    StabilityClassifier,
    train_baseline,
    train_recurrent,
)


class LinearSurrogate(StabilityClassifier):
    """Logistic model over the raw window values with closed-form input gradients."""

    kind = "linear-surrogate"
    differentiable = True

    def __init__(self, weights: np.ndarray, bias: float = 0.0) -> None:
        super().__init__(window_size=weights.shape[0], hyperparameters={}, seed=0)
        self.weights = weights
        self.bias = bias

    @property
    def is_fitted(self) -> bool:
        return True

    def _predict_proba(self, windows: np.ndarray) -> np.ndarray:
        return expit(np.einsum("nwf,wf->n", windows, self.weights) + self.bias)

    def loss_gradient(self, windows: np.ndarray, targets: np.ndarray, *, loss_weight: float = 1.0) -> np.ndarray:
        values = self.check_input(windows)
        residual = self._predict_proba(values) - np.broadcast_to(targets, (len(values),))

        return loss_weight * residual[:, np.newaxis, np.newaxis] * self.weights[np.newaxis]


def make_linear_surrogate(
    seed: int = 0, window_size: int = 16, bias: float = 0.0, scale: float = 1.0
) -> LinearSurrogate:
    rng = np.random.default_rng(seed)

    return LinearSurrogate(scale * rng.standard_normal((window_size, N_FEATURES)), bias)


def constant_surrogate(stable: bool, window_size: int = 16) -> LinearSurrogate:
    return LinearSurrogate(np.zeros((window_size, N_FEATURES)), 5.0 if stable else -5.0)


def fixture_experiment_config(output_dir: pathlib.Path, **sections: Any) -> ExperimentConfig:
    data: dict[str, Any] = {
        "output_dir": str(output_dir),
        "dataset": {"path": str(FIXTURE_DATASET_PATH)},
        "models": {
            "kinds": ["xgboost", "knn", "lstm"],
            "hyperparameters": {"xgboost": {"n_estimators": 20}},
            "recurrent": {"hidden_units": 8, "epochs": 2, "batch_size": 16},
        },
        "whitebox": {
            "attacks": ["fgsm", "random_noise"],
            "models": ["lstm", "xgboost"],
            "sweep_epsilons": [0.1, 0.5],
            "attack": {"iterations": 2, "noise_attempts": 3},
        },
        "gangrid": {
            "targets": ["lstm", "xgboost"],
            "rl": {"episodes": 2, "max_episode_length": 2, "batch_size": 4, "probe_batches": 2, "latent_dim": 8},
        },
        "analysis": {"importance_repeats": 3, "importance_models": ["xgboost"], "cdf_points": 11},
    }
    data.update(sections)

    return ExperimentConfig.model_validate(data)


@pytest.fixture(autouse=True)
def _reset_logging():
    yield

    logger.remove()
    logger.add(sys.stderr, level="DEBUG")


@pytest.fixture(scope="session")
def prepared() -> PreparedData:
    return prepare_dataset(DatasetConfig())


@pytest.fixture(scope="session")
def test_arrays(prepared: PreparedData) -> tuple[np.ndarray, np.ndarray]:
    return stack_windows(prepared.split.test)


@pytest.fixture(scope="session")
def small_lstm(prepared: PreparedData) -> RecurrentClassifier:
    config = RecurrentNetConfig(hidden_units=8, epochs=2, batch_size=16)

    return train_recurrent(prepared.split, config, seed=0, normalization=prepared.normalization)


@pytest.fixture(scope="session")
def small_xgboost(prepared: PreparedData) -> BaselineClassifier:
    return train_baseline("xgboost", prepared.split, {"n_estimators": 20}, seed=0, normalization=prepared.normalization)


@pytest.fixture
def linear_surrogate() -> LinearSurrogate:
    return make_linear_surrogate()
