import dataclasses
from collections.abc import Mapping, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy.stats import ks_2samp

from grid_adversary.dataset import FEATURE_COLUMNS, FEATURE_GROUPS, N_FEATURES
from grid_adversary.models import StabilityClassifier


class AnalysisError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class DistributionReport:
    features: list[str]
    ks_statistics: np.ndarray
    ks_pvalues: np.ndarray
    real_medians: np.ndarray
    generated_medians: np.ndarray
    # (n_features, cdf_points) grid and the two empirical CDFs evaluated on it
    grid: np.ndarray
    real_cdf: np.ndarray
    generated_cdf: np.ndarray

    @property
    def median_shift_sign(self) -> np.ndarray:
        return np.sign(self.generated_medians - self.real_medians).astype(np.int64)

    def shifted_features(self, threshold: float = 0.1) -> list[str]:
        return [name for name, ks in zip(self.features, self.ks_statistics, strict=True) if ks > threshold]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "feature": self.features,
                "ks_statistic": self.ks_statistics,
                "ks_pvalue": self.ks_pvalues,
                "real_median": self.real_medians,
                "generated_median": self.generated_medians,
                "median_shift_sign": self.median_shift_sign,
            }
        )

    def cdf_frame(self) -> pd.DataFrame:
        frames = [
            pd.DataFrame(
                {
                    "feature": name,
                    "value": self.grid[i],
                    "real_cdf": self.real_cdf[i],
                    "generated_cdf": self.generated_cdf[i],
                }
            )
            for i, name in enumerate(self.features)
        ]

        return pd.concat(frames, ignore_index=True)


@dataclasses.dataclass(frozen=True)
class GroupImportance:
    group: str
    mean_drop: float
    std_drop: float
    rank: int


def _as_rows(values: np.ndarray, name: str) -> np.ndarray:
    rows = np.asarray(values, dtype=np.float64)

    # windows are compared row by row
    if rows.ndim == 3:
        rows = rows.reshape(-1, rows.shape[-1])

    if rows.ndim != 2 or len(rows) == 0:
        raise AnalysisError(f"The {name} sample must be a non-empty 2D or 3D array, got shape {rows.shape}")

    return rows


def _empirical_cdf(sample: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(sample), grid, side="right") / len(sample)


def distribution_compare(
    real: np.ndarray,
    generated: np.ndarray,
    cdf_points: int = 101,
    feature_names: Sequence[str] | None = None,
) -> DistributionReport:
    """Compare two samples feature by feature; pass both in the same (de-normalized) units."""

    real_rows = _as_rows(real, "real")
    generated_rows = _as_rows(generated, "generated")

    if real_rows.shape[1] != generated_rows.shape[1]:
        raise AnalysisError(
            f"Feature-count mismatch: {real_rows.shape[1]} real features vs {generated_rows.shape[1]} generated"
        )

    n_features = real_rows.shape[1]
    if feature_names is not None:
        names = list(feature_names)
    elif n_features == N_FEATURES:
        names = list(FEATURE_COLUMNS)
    else:
        names = [f"feature_{i}" for i in range(n_features)]

    ks_statistics = np.empty(n_features)
    ks_pvalues = np.empty(n_features)
    grid = np.empty((n_features, cdf_points))
    real_cdf = np.empty((n_features, cdf_points))
    generated_cdf = np.empty((n_features, cdf_points))

    for i in range(n_features):
        result = ks_2samp(real_rows[:, i], generated_rows[:, i])
        ks_statistics[i] = result.statistic
        ks_pvalues[i] = result.pvalue

        low = min(real_rows[:, i].min(), generated_rows[:, i].min())
        high = max(real_rows[:, i].max(), generated_rows[:, i].max())
        grid[i] = np.linspace(low, high, cdf_points)
        real_cdf[i] = _empirical_cdf(real_rows[:, i], grid[i])
        generated_cdf[i] = _empirical_cdf(generated_rows[:, i], grid[i])

    report = DistributionReport(
        features=names,
        ks_statistics=ks_statistics,
        ks_pvalues=ks_pvalues,
        real_medians=np.median(real_rows, axis=0),
        generated_medians=np.median(generated_rows, axis=0),
        grid=grid,
        real_cdf=real_cdf,
        generated_cdf=generated_cdf,
    )

    logger.info(
        f"Compared {len(real_rows)} real and {len(generated_rows)} generated rows: "
        f"{len(report.shifted_features())}/{n_features} features with KS > 0.1"
    )

    return report


def permutation_importance(
    classifier: StabilityClassifier,
    windows: np.ndarray,
    labels: np.ndarray,
    repeats: int = 5,
    seed: int = 0,
    groups: Mapping[str, Sequence[int]] = FEATURE_GROUPS,
) -> list[GroupImportance]:
    """Mean accuracy drop when the columns of a feature group are shuffled across windows.

    Each group's columns are permuted together with a single window permutation per repeat, so
    the rows inside a window keep their order. Groups are returned most important first.
    """

    if repeats < 3:
        raise AnalysisError(f"repeats must be >= 3, got {repeats}")

    if not classifier.is_fitted:
        raise AnalysisError(f"The {classifier.kind} classifier is not trained")

    values = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels)

    if values.ndim != 3 or len(values) == 0:
        raise AnalysisError(f"Expected a non-empty batch of windows, got shape {values.shape}")

    rng = np.random.default_rng(seed)
    baseline = float(np.mean(classifier.predict(values) == labels))
    drops: dict[str, list[float]] = {name: [] for name in groups}

    for _ in range(repeats):
        for name, columns in groups.items():
            permuted = values.copy()
            order = rng.permutation(len(values))
            permuted[:, :, list(columns)] = values[order][:, :, list(columns)]
            drops[name].append(baseline - float(np.mean(classifier.predict(permuted) == labels)))

    ranked = sorted(drops.items(), key=lambda item: float(np.mean(item[1])), reverse=True)
    importances = [
        GroupImportance(
            group=name,
            mean_drop=float(np.mean(group_drops)),
            std_drop=float(np.std(group_drops)),
            rank=rank,
        )
        for rank, (name, group_drops) in enumerate(ranked, start=1)
    ]

    logger.info(
        f"Permutation importance for {classifier.kind} (baseline accuracy {baseline:.4f}): "
        + ", ".join(f"{item.group}={item.mean_drop:.4f}" for item in importances)
    )

    return importances


def importance_to_frame(importances: Sequence[GroupImportance], model: str) -> pd.DataFrame:
    frame = pd.DataFrame(
        [dataclasses.asdict(item) for item in importances],
        columns=["group", "mean_drop", "std_drop", "rank"],
    )
    frame.insert(0, "model", model)

    return frame
