import dataclasses
import itertools
import math
import pathlib
from collections.abc import Sequence

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from grid_adversary.config import DatasetConfig
from grid_adversary.utils import read_json, write_json

TAU_COLUMNS = ["tau1", "tau2", "tau3", "tau4"]
P_COLUMNS = ["p1", "p2", "p3", "p4"]
G_COLUMNS = ["g1", "g2", "g3", "g4"]
FEATURE_COLUMNS = TAU_COLUMNS + P_COLUMNS + G_COLUMNS
LABEL_COLUMNS = ["stab", "stabf"]
CSV_COLUMNS = FEATURE_COLUMNS + LABEL_COLUMNS

N_FEATURES = len(FEATURE_COLUMNS)

FEATURE_GROUPS: dict[str, list[int]] = {
    "tau": [FEATURE_COLUMNS.index(column) for column in TAU_COLUMNS],
    "p": [FEATURE_COLUMNS.index(column) for column in P_COLUMNS],
    "g": [FEATURE_COLUMNS.index(column) for column in G_COLUMNS],
}

STABLE = "stable"
UNSTABLE = "unstable"
LABEL_ENCODING = {UNSTABLE: 0, STABLE: 1}
LABEL_DECODING = {code: name for name, code in LABEL_ENCODING.items()}

# index 0 is the producer, only the consumer nodes (1-3) are interchangeable;
# itertools yields the identity permutation first
CONSUMER_PERMUTATIONS: list[tuple[int, int, int]] = list(itertools.permutations((1, 2, 3)))

PREPARED_MANIFEST_NAME = "prepared.json"
PREPARED_ARRAYS_NAME = "windows.npz"

NodeValues = tuple[float, float, float, float]


class DatasetError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class GridRecord:
    tau: NodeValues
    p: NodeValues
    g: NodeValues
    stab: float
    stabf: str

    def __post_init__(self) -> None:
        for name in ("tau", "p", "g"):
            if len(getattr(self, name)) != 4:
                raise DatasetError(f"{name} must have exactly 4 values (one per node), got {getattr(self, name)}")

        if not all(math.isfinite(value) for value in self.features):
            raise DatasetError(f"All feature values must be finite, got {self.features}")

        if self.stabf not in LABEL_ENCODING:
            raise DatasetError(f"Unknown stability label '{self.stabf}', must be '{STABLE}' or '{UNSTABLE}'")

    @property
    def features(self) -> tuple[float, ...]:
        return (*self.tau, *self.p, *self.g)

    @property
    def label(self) -> int:
        return LABEL_ENCODING[self.stabf]


class NormalizationParams(BaseModel):
    minimum: list[float] = Field(min_length=N_FEATURES, max_length=N_FEATURES)
    maximum: list[float] = Field(min_length=N_FEATURES, max_length=N_FEATURES)
    constant_features: list[str] = Field(
        default_factory=list,
        description="Features with max == min on the training rows, mapped to 0.0",
    )

    @model_validator(mode="after")
    def validate_bounds(self) -> "NormalizationParams":
        for column, low, high in zip(FEATURE_COLUMNS, self.minimum, self.maximum, strict=True):
            if high < low:
                raise ValueError(f"{column}: maximum {high} is smaller than minimum {low}")

        return self

    @property
    def minimum_array(self) -> np.ndarray:
        return np.asarray(self.minimum, dtype=np.float64)

    @property
    def span_array(self) -> np.ndarray:
        return np.asarray(self.maximum, dtype=np.float64) - self.minimum_array


@dataclasses.dataclass(frozen=True, eq=False)
class WindowedSample:
    values: np.ndarray
    label: int
    index: int

    @property
    def window_size(self) -> int:
        return int(self.values.shape[0])


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    train: list[WindowedSample]
    validation: list[WindowedSample]
    test: list[WindowedSample]
    split_seed: int

    def subsets(self) -> dict[str, list[WindowedSample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclasses.dataclass(frozen=True)
class PreparedData:
    split: DatasetSplit
    normalization: NormalizationParams
    window_size: int
    step: int
    dataset_path: str


def load_records(path: pathlib.Path) -> list[GridRecord]:
    if not path.is_file():
        raise FileNotFoundError(f"Dataset file not found: {path}")

    logger.info(f"Loading grid records from {path}")

    try:
        # everything is read as text so that non-numeric cells can be reported instead of silently coerced
        frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise DatasetError(f"{path.name}: file is empty, expected a header row with columns {CSV_COLUMNS}") from exc

    frame.columns = [str(column).strip() for column in frame.columns]

    missing_columns = [column for column in CSV_COLUMNS if column not in frame.columns]
    extra_columns = [column for column in frame.columns if column not in CSV_COLUMNS]

    if missing_columns or extra_columns:
        raise DatasetError(f"{path.name}: unexpected columns (missing: {missing_columns}, extra: {extra_columns})")

    numeric = frame[FEATURE_COLUMNS + ["stab"]].apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    invalid_cells = ~np.isfinite(numeric.to_numpy(dtype=np.float64))

    if invalid_cells.any():
        row, col = np.argwhere(invalid_cells)[0]
        column = numeric.columns[col]
        raise DatasetError(
            f"{path.name}: non-numeric value '{frame[column].iloc[row]}' in column '{column}' at data row {row + 1}"
        )

    labels = frame["stabf"].str.strip()
    unknown_labels = sorted(set(labels) - set(LABEL_ENCODING))

    if unknown_labels:
        raise DatasetError(f"{path.name}: unknown stability labels {unknown_labels}")

    values = numeric.to_numpy(dtype=np.float64)
    records = [
        GridRecord(
            tau=tuple(row[0:4]),  # type: ignore[arg-type]
            p=tuple(row[4:8]),  # type: ignore[arg-type]
            g=tuple(row[8:12]),  # type: ignore[arg-type]
            stab=float(row[12]),
            stabf=label,
        )
        for row, label in zip(values.tolist(), labels, strict=True)
    ]

    logger.info(f"Loaded {len(records)} records from {path.name}")

    return records


def records_to_frame(records: Sequence[GridRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(*record.features, record.stab, record.stabf) for record in records],
        columns=CSV_COLUMNS,
    )


def feature_matrix(records: Sequence[GridRecord]) -> np.ndarray:
    if not records:
        return np.empty((0, N_FEATURES), dtype=np.float64)

    return np.asarray([record.features for record in records], dtype=np.float64)


def label_vector(records: Sequence[GridRecord]) -> np.ndarray:
    return np.asarray([record.label for record in records], dtype=np.int64)


def _permute_consumers(values: NodeValues, permutation: tuple[int, int, int]) -> NodeValues:
    return (values[0], values[permutation[0]], values[permutation[1]], values[permutation[2]])


def augment_symmetry(records: Sequence[GridRecord]) -> list[GridRecord]:
    # one copy per permutation of the consumer nodes, identity first, tau p and g permuted together
    if not records:
        raise DatasetError("Cannot augment an empty list of records")

    augmented = [
        GridRecord(
            tau=_permute_consumers(record.tau, permutation),
            p=_permute_consumers(record.p, permutation),
            g=_permute_consumers(record.g, permutation),
            stab=record.stab,
            stabf=record.stabf,
        )
        for record in records
        for permutation in CONSUMER_PERMUTATIONS
    ]

    logger.info(f"Augmented {len(records)} records to {len(augmented)} by consumer-node symmetry")

    return augmented


def _as_feature_array(rows: Sequence[GridRecord] | np.ndarray) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        values = rows.astype(np.float64, copy=False)
    else:
        values = feature_matrix(rows)

    if values.shape[-1] != N_FEATURES:
        raise DatasetError(f"Expected {N_FEATURES} features in the last dimension, got shape {values.shape}")

    return values


def fit_normalizer(train_rows: Sequence[GridRecord] | np.ndarray) -> NormalizationParams:
    values = _as_feature_array(train_rows).reshape(-1, N_FEATURES)

    if len(values) == 0:
        raise DatasetError("Cannot fit the normalizer on zero rows")

    minimum = values.min(axis=0)
    maximum = values.max(axis=0)

    constant_features = [
        column for column, low, high in zip(FEATURE_COLUMNS, minimum, maximum, strict=True) if low == high
    ]

    for column in constant_features:
        logger.warning(f"Feature '{column}' is constant on the training rows, it will be normalized to 0.0")

    return NormalizationParams(
        minimum=minimum.tolist(),
        maximum=maximum.tolist(),
        constant_features=constant_features,
    )


def apply_normalizer(params: NormalizationParams, rows: Sequence[GridRecord] | np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; works on any array whose last dimension holds the 12 features.

    Values outside the fitted range are clamped, constant features map to 0.0.
    """

    values = _as_feature_array(rows)
    span = params.span_array
    safe_span = np.where(span > 0, span, 1.0)

    scaled = np.where(span > 0, (values - params.minimum_array) / safe_span, 0.0)

    return np.clip(scaled, 0.0, 1.0)


def invert_normalizer(params: NormalizationParams, normalized: np.ndarray) -> np.ndarray:
    normalized = _as_feature_array(normalized)

    return normalized * params.span_array + params.minimum_array


def _windows_from_arrays(features: np.ndarray, labels: np.ndarray, window_size: int, step: int) -> list[WindowedSample]:
    if window_size < 1:
        raise DatasetError(f"window_size must be >= 1, got {window_size}")

    if step < 1:
        raise DatasetError(f"step must be >= 1, got {step}")

    n_rows = len(features)

    if n_rows < window_size:
        raise DatasetError(f"insufficient rows: {n_rows} rows for a window of {window_size}")

    n_windows = (n_rows - window_size) // step + 1

    return [
        WindowedSample(
            values=features[index * step : index * step + window_size].copy(),
            # the prediction target is the state at the most recent observation
            label=int(labels[index * step + window_size - 1]),
            index=index,
        )
        for index in range(n_windows)
    ]


def make_windows(records: Sequence[GridRecord], window_size: int = 16, step: int = 8) -> list[WindowedSample]:
    """Slide a window over the records in file order.

    Window ``i`` covers rows ``[i * step, i * step + window_size)`` and takes the label of its last row.
    """

    windows = _windows_from_arrays(feature_matrix(records), label_vector(records), window_size, step)

    logger.debug(f"Built {len(windows)} windows of size {window_size} with step {step} from {len(records)} rows")

    return windows


def normalize_windows(params: NormalizationParams, windows: Sequence[WindowedSample]) -> list[WindowedSample]:
    return [
        WindowedSample(values=apply_normalizer(params, window.values), label=window.label, index=window.index)
        for window in windows
    ]


def split(
    windows: Sequence[WindowedSample],
    ratios: tuple[float, float, float] = (0.75, 0.05, 0.20),
    seed: int = 42,
    *,
    allow_empty_validation: bool = False,
) -> DatasetSplit:
    if len(ratios) != 3:
        raise DatasetError(f"Expected 3 ratios (train, validation, test), got {ratios}")

    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DatasetError(f"Split ratios must sum to 1, got {ratios} (sum {sum(ratios)})")

    train_ratio, validation_ratio, test_ratio = ratios

    if train_ratio <= 0 or test_ratio <= 0 or validation_ratio < 0:
        raise DatasetError(f"Every split ratio must be positive, got {ratios}")

    if validation_ratio == 0 and not allow_empty_validation:
        raise DatasetError("Validation ratio is 0, pass allow_empty_validation=True to permit an empty validation set")

    n_windows = len(windows)
    n_test = round(n_windows * test_ratio)
    n_validation = round(n_windows * validation_ratio)
    n_train = n_windows - n_test - n_validation

    if n_train <= 0 or n_test <= 0:
        raise DatasetError(f"Too few windows ({n_windows}) for the split {ratios}")

    if n_validation == 0:
        if not allow_empty_validation:
            raise DatasetError(f"Too few windows ({n_windows}) to fill the validation set ({validation_ratio})")

        logger.warning("Validation split is empty")

    order = np.random.default_rng(seed).permutation(n_windows)

    result = DatasetSplit(
        train=[windows[i] for i in order[:n_train]],
        validation=[windows[i] for i in order[n_train : n_train + n_validation]],
        test=[windows[i] for i in order[n_train + n_validation :]],
        split_seed=seed,
    )

    logger.info(
        f"Split {n_windows} windows into train={len(result.train)}, "
        f"validation={len(result.validation)}, test={len(result.test)} (seed={seed})"
    )

    return result


def stack_windows(windows: Sequence[WindowedSample]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        return np.empty((0, 0, N_FEATURES), dtype=np.float64), np.empty(0, dtype=np.int64)

    values = np.stack([window.values for window in windows]).astype(np.float64, copy=False)
    labels = np.asarray([window.label for window in windows], dtype=np.int64)

    return values, labels


def prepare_dataset(config: DatasetConfig) -> PreparedData:
    records = load_records(config.path)

    if config.augment:
        records = augment_symmetry(records)

    raw_windows = make_windows(records, window_size=config.window_size, step=config.step)
    raw_split = split(
        raw_windows,
        config.split_ratios,
        config.split_seed,
        allow_empty_validation=config.allow_empty_validation,
    )

    train_rows, _ = stack_windows(raw_split.train)
    params = fit_normalizer(train_rows)

    normalized_split = DatasetSplit(
        train=normalize_windows(params, raw_split.train),
        validation=normalize_windows(params, raw_split.validation),
        test=normalize_windows(params, raw_split.test),
        split_seed=raw_split.split_seed,
    )

    return PreparedData(
        split=normalized_split,
        normalization=params,
        window_size=config.window_size,
        step=config.step,
        dataset_path=str(config.path),
    )


def save_prepared(prepared: PreparedData, output_dir: pathlib.Path) -> pathlib.Path:
    manifest_path = output_dir / PREPARED_MANIFEST_NAME

    write_json(
        manifest_path,
        {
            "dataset_path": prepared.dataset_path,
            "window_size": prepared.window_size,
            "step": prepared.step,
            "split_seed": prepared.split.split_seed,
            "normalization": prepared.normalization.model_dump(),
            "subsets": {
                name: [window.index for window in windows] for name, windows in prepared.split.subsets().items()
            },
        },
    )

    arrays: dict[str, np.ndarray] = {}
    for name, windows in prepared.split.subsets().items():
        values, labels = stack_windows(windows)
        arrays[f"{name}_values"] = values
        arrays[f"{name}_labels"] = labels
        arrays[f"{name}_index"] = np.asarray([window.index for window in windows], dtype=np.int64)

    np.savez_compressed(output_dir / PREPARED_ARRAYS_NAME, **arrays)

    logger.info(f"Saved prepared dataset to {output_dir}")

    return manifest_path


def load_prepared(output_dir: pathlib.Path) -> PreparedData:
    manifest_path = output_dir / PREPARED_MANIFEST_NAME
    arrays_path = output_dir / PREPARED_ARRAYS_NAME

    if not manifest_path.is_file() or not arrays_path.is_file():
        raise DatasetError(f"No prepared dataset found in {output_dir}, run prepare-data first")

    manifest = read_json(manifest_path)

    subsets: dict[str, list[WindowedSample]] = {}
    with np.load(arrays_path) as arrays:
        for name in ("train", "validation", "test"):
            subsets[name] = [
                WindowedSample(values=values, label=int(label), index=int(index))
                for values, label, index in zip(
                    arrays[f"{name}_values"], arrays[f"{name}_labels"], arrays[f"{name}_index"], strict=True
                )
            ]

    return PreparedData(
        split=DatasetSplit(**subsets, split_seed=manifest["split_seed"]),
        normalization=NormalizationParams.model_validate(manifest["normalization"]),
        window_size=manifest["window_size"],
        step=manifest["step"],
        dataset_path=manifest["dataset_path"],
    )


def windows_to_frame(
    values: np.ndarray,
    params: NormalizationParams,
    labels: np.ndarray | None = None,
    extra_columns: dict[str, np.ndarray] | None = None,
) -> pd.DataFrame:
    """De-normalize a ``(n_windows, window_size, 12)`` array into rows of the dataset CSV schema."""

    n_windows, window_size, _ = values.shape
    rows = invert_normalizer(params, values).reshape(-1, N_FEATURES)

    frame = pd.DataFrame(rows, columns=FEATURE_COLUMNS)
    frame["stab"] = np.nan
    frame["stabf"] = (
        [LABEL_DECODING[int(label)] for label in np.repeat(labels, window_size)] if labels is not None else ""
    )
    frame.insert(0, "window", np.repeat(np.arange(n_windows), window_size))

    for name, column_values in (extra_columns or {}).items():
        frame[name] = np.repeat(np.asarray(column_values), window_size)

    return frame
