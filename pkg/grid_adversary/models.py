import abc
import copy
import dataclasses
import pathlib
import time
from collections.abc import Sequence
from typing import Any

import joblib
import numpy as np
import torch
import torch.nn.functional as F
from lightgbm import LGBMClassifier
from loguru import logger
from pydantic import BaseModel, Field
from sklearn.ensemble import ExtraTreesClassifier, RandomForestClassifier
from sklearn.metrics import confusion_matrix
from sklearn.neighbors import KNeighborsClassifier
from sklearn.tree import DecisionTreeClassifier
from torch import nn
from torch.utils.data import DataLoader, TensorDataset
from xgboost import XGBClassifier

from grid_adversary.config import BASELINE_KINDS, ModelKind, RecurrentNetConfig
from grid_adversary.dataset import (
    LABEL_DECODING,
    LABEL_ENCODING,
    N_FEATURES,
    DatasetSplit,
    NormalizationParams,
    WindowedSample,
    stack_windows,
)
from grid_adversary.utils import read_json, write_json

MODEL_FORMAT_VERSION = 1
METADATA_FILE_NAME = "metadata.json"
BASELINE_PAYLOAD_NAME = "model.joblib"
RECURRENT_PAYLOAD_NAME = "model.pt"

DECISION_THRESHOLD = 0.5


class ModelError(ValueError):
    pass


class GradientsUnavailableError(ModelError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class Prediction:
    probabilities: np.ndarray
    labels: np.ndarray

    @property
    def label_names(self) -> list[str]:
        return [LABEL_DECODING[int(label)] for label in self.labels]


class EvalReport(BaseModel):
    accuracy: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    tp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    support: dict[str, int]

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_counts(cls, tp: int, tn: int, fp: int, fn: int) -> "EvalReport":
        total = tp + tn + fp + fn

        if total == 0:
            raise ModelError("Cannot build an evaluation report from zero windows")

        f1_denominator = 2 * tp + fp + fn

        return cls(
            accuracy=(tp + tn) / total,
            # no positive predictions and no positives: every window was correctly called unstable
            f1=(2 * tp) / f1_denominator if f1_denominator > 0 else 1.0,
            tp=tp,
            tn=tn,
            fp=fp,
            fn=fn,
            support={"stable": tp + fn, "unstable": tn + fp},
        )

    @classmethod
    def from_labels(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "EvalReport":
        tn, fp, fn, tp = confusion_matrix(y_true, y_pred, labels=[0, 1]).ravel()

        return cls.from_counts(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn))


class ModelMetadata(BaseModel):
    format_version: int = MODEL_FORMAT_VERSION
    kind: str
    hyperparameters: dict[str, Any]
    seed: int
    window_size: int
    payload: str
    normalization: NormalizationParams | None = None
    metrics: dict[str, float] | None = None


def threshold_probabilities(probabilities: np.ndarray) -> np.ndarray:
    return (probabilities >= DECISION_THRESHOLD).astype(np.int64)


class StabilityClassifier(abc.ABC):
    kind: str
    differentiable: bool = False

    def __init__(
        self,
        *,
        window_size: int,
        hyperparameters: dict[str, Any],
        seed: int,
        normalization: NormalizationParams | None = None,
    ) -> None:
        self.window_size = window_size
        self.hyperparameters = hyperparameters
        self.seed = seed
        self.normalization = normalization

    @property
    @abc.abstractmethod
    def is_fitted(self) -> bool: ...

    @abc.abstractmethod
    def _predict_proba(self, windows: np.ndarray) -> np.ndarray: ...

    def check_input(self, windows: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
        if not self.is_fitted:
            raise ModelError(f"The {self.kind} classifier is not fitted")

        values = np.asarray(windows, dtype=np.float64)

        if values.size == 0:
            raise ModelError("Cannot predict on an empty batch")

        if values.ndim == 2:
            values = values[np.newaxis]

        if values.ndim != 3 or values.shape[1:] != (self.window_size, N_FEATURES):
            raise ModelError(
                f"Shape mismatch: expected windows of shape ({self.window_size}, {N_FEATURES}), got {values.shape}"
            )

        return values

    def predict_proba(self, windows: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
        values = self.check_input(windows)

        return np.clip(self._predict_proba(values), 0.0, 1.0)

    def predict(self, windows: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
        return threshold_probabilities(self.predict_proba(windows))

    def loss_gradient(self, windows: np.ndarray, targets: np.ndarray, *, loss_weight: float = 1.0) -> np.ndarray:
        """Gradient of the summed binary cross-entropy w.r.t. every input window."""

        raise GradientsUnavailableError(
            f"Gradients unavailable: the {self.kind} classifier is not differentiable w.r.t. its input"
        )


class BaselineClassifier(StabilityClassifier):
    def __init__(
        self,
        kind: ModelKind,
        estimator: Any,
        *,
        window_size: int,
        hyperparameters: dict[str, Any],
        seed: int,
        normalization: NormalizationParams | None = None,
        fitted: bool = False,
    ) -> None:
        super().__init__(
            window_size=window_size,
            hyperparameters=hyperparameters,
            seed=seed,
            normalization=normalization,
        )
        self.kind = kind
        self.estimator = estimator
        self._fitted = fitted

    @property
    def is_fitted(self) -> bool:
        return self._fitted

    def fit(self, windows: np.ndarray, labels: np.ndarray) -> None:
        self.estimator.fit(windows.reshape(len(windows), -1), labels)
        self._fitted = True

    def _predict_proba(self, windows: np.ndarray) -> np.ndarray:
        probabilities = self.estimator.predict_proba(windows.reshape(len(windows), -1))
        stable_column = list(self.estimator.classes_).index(LABEL_ENCODING["stable"])

        return np.asarray(probabilities[:, stable_column], dtype=np.float64)


class BiLSTMNet(nn.Module):
    def __init__(self, n_features: int = N_FEATURES, hidden_units: int = 220, dropout_rate: float = 0.5) -> None:
        super().__init__()
        self.lstm = nn.LSTM(
            input_size=n_features,
            hidden_size=hidden_units,
            num_layers=1,
            batch_first=True,
            bidirectional=True,
        )
        self.dropout = nn.Dropout(dropout_rate)
        self.head = nn.Linear(2 * hidden_units, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, (hidden, _) = self.lstm(x)
        # final forward state and final backward state, (batch, 2 * hidden_units)
        features = torch.cat([hidden[-2], hidden[-1]], dim=1)

        return self.head(self.dropout(features)).squeeze(-1)


class RecurrentClassifier(StabilityClassifier):
    kind = ModelKind.LSTM
    differentiable = True

    def __init__(
        self,
        net: BiLSTMNet,
        config: RecurrentNetConfig,
        *,
        window_size: int,
        seed: int,
        normalization: NormalizationParams | None = None,
    ) -> None:
        super().__init__(
            window_size=window_size,
            hyperparameters=config.model_dump(),
            seed=seed,
            normalization=normalization,
        )
        self.config = config
        # inference and gradients run in double precision with dropout disabled
        self.net = net.double().eval()

        for parameter in self.net.parameters():
            parameter.requires_grad_(False)

    @property
    def is_fitted(self) -> bool:
        return True

    def _predict_proba(self, windows: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.net(torch.as_tensor(windows, dtype=torch.float64))

        return torch.sigmoid(logits).numpy()

    def loss(self, windows: np.ndarray, targets: np.ndarray | int, *, loss_weight: float = 1.0) -> float:
        values = self.check_input(windows)
        target_tensor = torch.as_tensor(np.broadcast_to(targets, (len(values),)), dtype=torch.float64)

        with torch.no_grad():
            logits = self.net(torch.as_tensor(values, dtype=torch.float64))
            loss = F.binary_cross_entropy_with_logits(logits, target_tensor, reduction="sum")

        return loss_weight * float(loss)

    def loss_gradient(self, windows: np.ndarray, targets: np.ndarray, *, loss_weight: float = 1.0) -> np.ndarray:
        values = self.check_input(windows)
        inputs = torch.tensor(values, dtype=torch.float64, requires_grad=True)
        target_tensor = torch.as_tensor(np.broadcast_to(targets, (len(values),)), dtype=torch.float64)

        # the summed loss keeps every window's gradient equal to the gradient of its own loss
        loss = loss_weight * F.binary_cross_entropy_with_logits(self.net(inputs), target_tensor, reduction="sum")
        (gradient,) = torch.autograd.grad(loss, inputs)

        return gradient.numpy()


def _build_estimator(kind: ModelKind, hyperparameters: dict[str, Any], seed: int) -> Any:
    match kind:
        case ModelKind.XGBOOST:
            return XGBClassifier(
                **{"random_state": seed, "tree_method": "hist", "eval_metric": "logloss", **hyperparameters}
            )
        case ModelKind.LIGHTGBM:
            return LGBMClassifier(
                **{
                    "random_state": seed,
                    "deterministic": True,
                    "force_row_wise": True,
                    "verbose": -1,
                    **hyperparameters,
                }
            )
        case ModelKind.DECISION_TREE:
            return DecisionTreeClassifier(**{"random_state": seed, **hyperparameters})
        case ModelKind.EXTRA_TREES:
            return ExtraTreesClassifier(**{"random_state": seed, "n_jobs": -1, **hyperparameters})
        case ModelKind.RANDOM_FOREST:
            return RandomForestClassifier(**{"random_state": seed, "n_jobs": -1, **hyperparameters})
        case ModelKind.KNN:
            return KNeighborsClassifier(**hyperparameters)
        case _:
            raise ModelError(f"Unknown baseline kind '{kind}', must be one of {[str(k) for k in BASELINE_KINDS]}")


def _parse_kind(kind: str | ModelKind) -> ModelKind:
    try:
        return ModelKind(kind)
    except ValueError as exc:
        raise ModelError(f"Unknown model kind '{kind}', must be one of {[str(k) for k in ModelKind]}") from exc


def train_baseline(
    kind: str | ModelKind,
    split: DatasetSplit,
    hyperparameters: dict[str, Any] | None = None,
    *,
    seed: int = 0,
    normalization: NormalizationParams | None = None,
) -> BaselineClassifier:
    kind = _parse_kind(kind)

    if kind not in BASELINE_KINDS:
        raise ModelError(f"'{kind}' is not a baseline kind, use train_recurrent instead")

    windows, labels = stack_windows(split.train)

    if len(windows) == 0:
        raise ModelError("Cannot train on an empty training set")

    if len(np.unique(labels)) < 2:
        raise ModelError("single-class training set")

    hyperparameters = dict(hyperparameters or {})
    classifier = BaselineClassifier(
        kind,
        _build_estimator(kind, hyperparameters, seed),
        window_size=windows.shape[1],
        hyperparameters=hyperparameters,
        seed=seed,
        normalization=normalization,
    )

    logger.info(f"Training {kind} on {len(windows)} windows flattened to {windows[0].size} features")

    started_at = time.perf_counter()
    classifier.fit(windows, labels)

    logger.info(f"Trained {kind} in {time.perf_counter() - started_at:.1f}s")

    if split.validation:
        logger.info(f"{kind} validation accuracy: {evaluate(classifier, split.validation).accuracy:.4f}")

    return classifier


def _accuracy(net: nn.Module, windows: torch.Tensor, labels: torch.Tensor, batch_size: int) -> float:
    net.eval()
    correct = 0

    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            probabilities = torch.sigmoid(net(windows[start : start + batch_size]))
            predicted = (probabilities >= DECISION_THRESHOLD).to(labels.dtype)
            correct += int((predicted == labels[start : start + batch_size]).sum())

    return correct / len(windows)


def train_recurrent(
    split: DatasetSplit,
    config: RecurrentNetConfig | None = None,
    seed: int = 0,
    *,
    normalization: NormalizationParams | None = None,
) -> RecurrentClassifier:
    config = config or RecurrentNetConfig()

    windows, labels = stack_windows(split.train)

    if len(windows) == 0:
        raise ModelError("Cannot train on an empty training set")

    if windows.min() < 0.0 or windows.max() > 1.0:
        logger.warning("Training windows are not normalized to [0, 1]")

    train_x = torch.as_tensor(windows, dtype=torch.float32)
    train_y = torch.as_tensor(labels, dtype=torch.float32)

    if split.validation:
        validation_windows, validation_labels = stack_windows(split.validation)
        selection_x = torch.as_tensor(validation_windows, dtype=torch.float32)
        selection_y = torch.as_tensor(validation_labels, dtype=torch.float32)
        selection_name = "validation"
    else:
        logger.warning("No validation windows, selecting the best epoch on training accuracy")
        selection_x, selection_y, selection_name = train_x, train_y, "training"

    with torch.random.fork_rng():
        torch.manual_seed(seed)

        net = BiLSTMNet(hidden_units=config.hidden_units, dropout_rate=config.dropout_rate)
        loader = DataLoader(
            TensorDataset(train_x, train_y),
            batch_size=config.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(seed),
        )
        optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
        criterion = nn.BCEWithLogitsLoss()

        best_accuracy = -1.0
        best_epoch = 0
        best_state: dict[str, torch.Tensor] = {}

        for epoch in range(1, config.epochs + 1):
            net.train()
            epoch_loss = 0.0

            for batch_number, (batch_x, batch_y) in enumerate(loader, start=1):
                optimizer.zero_grad()
                loss = criterion(net(batch_x), batch_y)

                if not torch.isfinite(loss):
                    raise ModelError(
                        f"Non-finite training loss {loss.item()} at epoch {epoch}, batch {batch_number} "
                        f"(input range [{batch_x.min().item():.4f}, {batch_x.max().item():.4f}], "
                        f"learning rate {config.learning_rate})"
                    )

                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(batch_x)

            selection_accuracy = _accuracy(net, selection_x, selection_y, config.batch_size)

            logger.info(
                f"Epoch {epoch}/{config.epochs}: training loss {epoch_loss / len(train_x):.4f}, "
                f"{selection_name} accuracy {selection_accuracy:.4f}"
            )

            if selection_accuracy > best_accuracy:
                best_accuracy = selection_accuracy
                best_epoch = epoch
                best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)

    logger.info(f"Keeping weights of epoch {best_epoch} ({selection_name} accuracy {best_accuracy:.4f})")

    return RecurrentClassifier(
        net,
        config,
        window_size=windows.shape[1],
        seed=seed,
        normalization=normalization,
    )


def predict(classifier: StabilityClassifier, windows: np.ndarray | Sequence[np.ndarray]) -> Prediction:
    probabilities = classifier.predict_proba(windows)

    return Prediction(probabilities=probabilities, labels=threshold_probabilities(probabilities))


def evaluate_arrays(classifier: StabilityClassifier, windows: np.ndarray, labels: np.ndarray) -> EvalReport:
    if len(windows) == 0:
        raise ModelError("Cannot evaluate on an empty set of windows")

    return EvalReport.from_labels(labels, classifier.predict(windows))


def evaluate(classifier: StabilityClassifier, windows: Sequence[WindowedSample]) -> EvalReport:
    if not windows:
        raise ModelError("Cannot evaluate on an empty set of windows")

    values, labels = stack_windows(windows)

    return evaluate_arrays(classifier, values, labels)


def input_gradient(
    classifier: StabilityClassifier,
    window: np.ndarray,
    target_label: str | int | np.ndarray,
    *,
    loss_weight: float = 1.0,
) -> np.ndarray:
    if not classifier.differentiable:
        raise GradientsUnavailableError(
            f"Gradients unavailable: the {classifier.kind} classifier is not differentiable w.r.t. its input"
        )

    values = np.asarray(window, dtype=np.float64)
    targets = LABEL_ENCODING[target_label] if isinstance(target_label, str) else np.asarray(target_label)

    gradient = classifier.loss_gradient(values, np.asarray(targets, dtype=np.float64), loss_weight=loss_weight)

    return gradient[0] if values.ndim == 2 else gradient


def save_classifier(
    classifier: StabilityClassifier,
    directory: pathlib.Path,
    *,
    metrics: dict[str, float] | None = None,
) -> pathlib.Path:
    directory.mkdir(parents=True, exist_ok=True)

    if isinstance(classifier, BaselineClassifier):
        payload = BASELINE_PAYLOAD_NAME
        joblib.dump(classifier.estimator, directory / payload)
    elif isinstance(classifier, RecurrentClassifier):
        payload = RECURRENT_PAYLOAD_NAME
        torch.save(classifier.net.state_dict(), directory / payload)
    else:
        raise ModelError(f"Don't know how to persist a {type(classifier).__name__}")

    metadata = ModelMetadata(
        kind=str(classifier.kind),
        hyperparameters=classifier.hyperparameters,
        seed=classifier.seed,
        window_size=classifier.window_size,
        payload=payload,
        normalization=classifier.normalization,
        metrics=metrics,
    )
    write_json(directory / METADATA_FILE_NAME, metadata.model_dump(mode="json"))

    logger.info(f"Saved {classifier.kind} classifier to {directory}")

    return directory


def load_classifier(directory: pathlib.Path) -> StabilityClassifier:
    metadata_path = directory / METADATA_FILE_NAME

    if not metadata_path.is_file():
        raise ModelError(f"No model metadata found at {metadata_path}")

    metadata = ModelMetadata.model_validate(read_json(metadata_path))

    if metadata.format_version != MODEL_FORMAT_VERSION:
        raise ModelError(
            f"Unsupported model format version {metadata.format_version}, expected {MODEL_FORMAT_VERSION}"
        )

    kind = _parse_kind(metadata.kind)
    payload_path = directory / metadata.payload

    if not payload_path.is_file():
        raise ModelError(f"Model payload {payload_path} is missing")

    if kind is ModelKind.LSTM:
        config = RecurrentNetConfig.model_validate(metadata.hyperparameters)
        net = BiLSTMNet(hidden_units=config.hidden_units, dropout_rate=config.dropout_rate).double()
        net.load_state_dict(torch.load(payload_path, weights_only=True))

        classifier: StabilityClassifier = RecurrentClassifier(
            net,
            config,
            window_size=metadata.window_size,
            seed=metadata.seed,
            normalization=metadata.normalization,
        )
    else:
        classifier = BaselineClassifier(
            kind,
            joblib.load(payload_path),
            window_size=metadata.window_size,
            hyperparameters=metadata.hyperparameters,
            seed=metadata.seed,
            normalization=metadata.normalization,
            fitted=True,
        )

    logger.info(f"Loaded {kind} classifier from {directory}")

    return classifier
