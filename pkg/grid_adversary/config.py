import enum
import math
import pathlib
import tomllib
from typing import Any, Literal, Self

from loguru import logger
from pydantic import BaseModel, Field, field_validator, model_validator

PROJECT_ROOT = pathlib.Path(__file__).parent.parent
ASSETS_DIR = PROJECT_ROOT / "assets"

FIXTURE_DATASET_PATH = ASSETS_DIR / "grid_stability_fixture.csv"

DEFAULT_SWEEP_EPSILONS: list[float] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50]


class ModelKind(enum.StrEnum):
    XGBOOST = "xgboost"
    LIGHTGBM = "lightgbm"
    DECISION_TREE = "decision_tree"
    EXTRA_TREES = "extra_trees"
    RANDOM_FOREST = "random_forest"
    KNN = "knn"
    LSTM = "lstm"


BASELINE_KINDS: tuple[ModelKind, ...] = tuple(kind for kind in ModelKind if kind is not ModelKind.LSTM)

# Tuned only as far as needed to land close to the published accuracies
DEFAULT_BASELINE_HYPERPARAMETERS: dict[ModelKind, dict[str, Any]] = {
    ModelKind.XGBOOST: {"n_estimators": 300, "max_depth": 6, "learning_rate": 0.1, "subsample": 1.0},
    ModelKind.LIGHTGBM: {"n_estimators": 100, "num_leaves": 15, "learning_rate": 0.05},
    ModelKind.DECISION_TREE: {"max_depth": None, "min_samples_leaf": 1},
    ModelKind.EXTRA_TREES: {"n_estimators": 200},
    ModelKind.RANDOM_FOREST: {"n_estimators": 200},
    ModelKind.KNN: {"n_neighbors": 5},
}

WhiteboxAttackName = Literal["fgsm", "bim", "pgd", "random_noise"]


class DatasetConfig(BaseModel):
    path: pathlib.Path = Field(
        default=FIXTURE_DATASET_PATH,
        description="CSV in the UCI grid stability schema (tau1..tau4, p1..p4, g1..g4, stab, stabf)",
    )
    augment: bool = Field(default=True, description="Expand the records sixfold by consumer-node symmetry")
    window_size: int = Field(default=16, ge=1)
    step: int = Field(default=8, ge=1)
    split_ratios: tuple[float, float, float] = (0.75, 0.05, 0.20)
    split_seed: int = 42
    allow_empty_validation: bool = False

    @field_validator("path")
    @classmethod
    def validate_path(cls, value: pathlib.Path) -> pathlib.Path:
        if not value.exists():
            raise ValueError(f"path: Dataset file does not exist: {value}")

        if not value.is_file():
            raise ValueError(f"path: Dataset path is not a file: {value}")

        return value

    @field_validator("split_ratios")
    @classmethod
    def validate_split_ratios(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"split_ratios: Ratios must sum to 1, got {value}")

        return value


class RecurrentNetConfig(BaseModel):
    hidden_units: int = Field(default=220, ge=1, description="Hidden units per LSTM direction")
    bidirectional: Literal[True] = True
    dropout_rate: float = Field(default=0.5, ge=0.0, lt=1.0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=64, ge=1)

    @property
    def head_input_width(self) -> int:
        return 2 * self.hidden_units


class ModelsConfig(BaseModel):
    kinds: list[ModelKind] = Field(default_factory=lambda: list(ModelKind))
    seed: int = 0
    hyperparameters: dict[ModelKind, dict[str, Any]] = Field(
        default_factory=lambda: {kind: dict(params) for kind, params in DEFAULT_BASELINE_HYPERPARAMETERS.items()},
        description="Per-kind keyword arguments forwarded to the estimator, merged over the defaults",
    )
    recurrent: RecurrentNetConfig = Field(default_factory=RecurrentNetConfig)

    def hyperparameters_for(self, kind: ModelKind) -> dict[str, Any]:
        return {**DEFAULT_BASELINE_HYPERPARAMETERS.get(kind, {}), **self.hyperparameters.get(kind, {})}


class AttackConfig(BaseModel):
    epsilon: float = Field(default=0.5, gt=0.0, description="L-infinity budget in normalized feature units")
    iterations: int = Field(default=10, ge=1)
    step_size: float | None = Field(default=None, gt=0.0, description="Per-iteration step, defaults to epsilon / 4")
    random_start: bool = True
    noise_attempts: int = Field(default=50, ge=0)
    noise_projection: bool = Field(default=False, description="Also clip random-noise candidates to the epsilon ball")
    seed: int = 0

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4


class WhiteboxConfig(BaseModel):
    attacks: list[WhiteboxAttackName] = Field(default_factory=lambda: ["fgsm", "bim", "pgd", "random_noise"])
    models: list[ModelKind] = Field(default_factory=lambda: [ModelKind.LSTM, ModelKind.XGBOOST])
    attack: AttackConfig = Field(default_factory=AttackConfig)
    sweep_epsilons: list[float] = Field(default_factory=lambda: list(DEFAULT_SWEEP_EPSILONS))
    max_windows: int | None = Field(default=None, ge=1, description="Attack only the first N test windows")

    @field_validator("sweep_epsilons")
    @classmethod
    def validate_sweep_epsilons(cls, value: list[float]) -> list[float]:
        if value != sorted(value):
            raise ValueError(f"sweep_epsilons: Values must be sorted ascending, got {value}")

        if any(eps <= 0 for eps in value):
            raise ValueError(f"sweep_epsilons: Values must be positive, got {value}")

        return value


class RLConfig(BaseModel):
    episodes: int = Field(default=50, ge=1)
    max_episode_length: int = Field(default=10, ge=1)
    gamma: float = Field(default=0.99, gt=0.0, le=1.0, description="Discount factor")
    alpha: float = Field(default=0.1, gt=0.0, description="Scale of the latent exploration noise")
    batch_size: int = Field(default=32, ge=1, description="Windows per oracle query")
    convergence_threshold: float = Field(default=0.95, gt=0.0, le=1.0)
    probe_batches: int = Field(default=20, ge=1)
    latent_dim: int = Field(default=64, ge=1)
    window_size: int = Field(default=16, ge=1)
    generator_learning_rate: float = Field(default=0.02, gt=0.0)
    latent_update: Literal["additive", "multiplicative"] = Field(
        default="additive",
        description="'additive' adds scaled Gaussian noise to the latent, 'multiplicative' rescales it in place",
    )
    target_mode: Literal["stable", "random"] = "stable"
    seed: int = 0


class GanGridConfig(BaseModel):
    rl: RLConfig = Field(default_factory=RLConfig)
    targets: list[ModelKind] = Field(default_factory=lambda: [ModelKind.LSTM, ModelKind.XGBOOST])
    generated_batches: int | None = Field(
        default=None,
        ge=1,
        description="Batches synthesized for evaluation, defaults to the number of batches in the test set",
    )
    generation_seed: int = 1
    cadence_seconds: float = Field(default=16.0, gt=0.0)


class OracleConfig(BaseModel):
    host: str = "127.0.0.1"
    port: int = Field(default=8016, ge=0, le=65535)
    model_dir: pathlib.Path | None = None
    labels_only: bool = True
    simulate_cadence: bool = False
    cadence_seconds: float = Field(default=16.0, gt=0.0)
    query_log: pathlib.Path | None = None
    timeout_seconds: float = Field(default=30.0, gt=0.0)
    max_retries: int = Field(default=3, ge=0)

    @property
    def endpoint(self) -> str:
        return f"http://{self.host}:{self.port}"


class AnalysisConfig(BaseModel):
    importance_repeats: int = Field(default=5, ge=3)
    importance_seed: int = 0
    importance_models: list[ModelKind] = Field(default_factory=lambda: [ModelKind.XGBOOST, ModelKind.LSTM])
    cdf_points: int = Field(default=101, ge=2)


class ExperimentConfig(BaseModel):
    output_dir: pathlib.Path = pathlib.Path("runs") / "default"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    models: ModelsConfig = Field(default_factory=ModelsConfig)
    whitebox: WhiteboxConfig = Field(default_factory=WhiteboxConfig)
    gangrid: GanGridConfig = Field(default_factory=GanGridConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    repeats: int = Field(default=1, ge=1, description="Repeats of training and every attack, reported as mean and std")

    @model_validator(mode="after")
    def validate_window_sizes(self) -> Self:
        if self.gangrid.rl.window_size != self.dataset.window_size:
            logger.debug(
                f"gangrid.rl.window_size ({self.gangrid.rl.window_size}) follows dataset.window_size "
                f"({self.dataset.window_size})"
            )
            self.gangrid.rl.window_size = self.dataset.window_size

        return self

    @classmethod
    def load_from_file(cls, file_path: pathlib.Path) -> Self:
        with file_path.open("rb") as f:
            data = tomllib.load(f)

        # relative paths in the file are relative to the file itself
        dataset_path = data.get("dataset", {}).get("path")
        if dataset_path is not None and not pathlib.Path(dataset_path).is_absolute():
            data["dataset"]["path"] = str((file_path.parent / dataset_path).resolve())

        return cls.model_validate(data)

    def with_overrides(self, **overrides: Any) -> Self:
        """Re-validated copy with dotted keys (e.g. ``"dataset.split_seed"``) set, ``None`` values are skipped."""

        data = self.model_dump()

        for dotted_key, value in overrides.items():
            if value is None:
                continue

            *parents, leaf = dotted_key.split(".")
            section = data
            for parent in parents:
                section = section[parent]
            section[leaf] = value

        return type(self).model_validate(data)

    def for_repeat(self, repeat: int) -> Self:
        # the split stays fixed, every training and attack seed moves by the repeat number
        return self.with_overrides(
            **{
                "models.seed": self.models.seed + repeat,
                "whitebox.attack.seed": self.whitebox.attack.seed + repeat,
                "gangrid.rl.seed": self.gangrid.rl.seed + repeat,
                "gangrid.generation_seed": self.gangrid.generation_seed + repeat,
            }
        )
