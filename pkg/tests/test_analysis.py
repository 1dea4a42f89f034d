import numpy as np
import pytest
from conftest import LinearSurrogate

from grid_adversary.analysis import (
    AnalysisError,
    distribution_compare,
    importance_to_frame,
    permutation_importance,
)
from grid_adversary.dataset import FEATURE_COLUMNS, FEATURE_GROUPS
from grid_adversary.models import BaselineClassifier


@pytest.fixture
def real_rows() -> np.ndarray:
    return np.random.default_rng(0).uniform(size=(200, 12))


def test_a_sample_compared_with_itself(real_rows):
    report = distribution_compare(real_rows, real_rows, cdf_points=21)

    assert report.features == FEATURE_COLUMNS
    np.testing.assert_array_equal(report.ks_statistics, np.zeros(12))
    np.testing.assert_array_equal(report.median_shift_sign, np.zeros(12))
    np.testing.assert_array_equal(report.real_cdf, report.generated_cdf)
    assert report.shifted_features() == []

    assert report.grid.shape == (12, 21)
    assert (np.diff(report.real_cdf, axis=1) >= 0).all()
    np.testing.assert_array_equal(report.real_cdf[:, -1], np.ones(12))


def test_disjoint_samples_are_fully_shifted(real_rows):
    report = distribution_compare(real_rows, real_rows + 2.0)

    np.testing.assert_allclose(report.ks_statistics, np.ones(12))
    np.testing.assert_array_equal(report.median_shift_sign, np.ones(12))
    assert report.shifted_features() == FEATURE_COLUMNS
    assert (report.ks_pvalues < 1e-6).all()


def test_median_shift_sign_points_down(real_rows):
    report = distribution_compare(real_rows, real_rows * 0.5)

    np.testing.assert_array_equal(report.median_shift_sign, -np.ones(12))


def test_windows_are_compared_row_by_row(real_rows):
    windows = real_rows[:192].reshape(12, 16, 12)

    report = distribution_compare(windows, real_rows[:192])

    np.testing.assert_array_equal(report.ks_statistics, np.zeros(12))


def test_report_frames(real_rows):
    report = distribution_compare(real_rows[:, :3], real_rows[:, :3] + 0.1, cdf_points=5)

    frame = report.to_frame()
    assert list(frame["feature"]) == ["feature_0", "feature_1", "feature_2"]
    assert list(frame.columns) == [
        "feature",
        "ks_statistic",
        "ks_pvalue",
        "real_median",
        "generated_median",
        "median_shift_sign",
    ]
    assert len(report.cdf_frame()) == 3 * 5


def test_distribution_compare_rejects_bad_samples(real_rows):
    with pytest.raises(AnalysisError, match="Feature-count mismatch"):
        distribution_compare(real_rows, real_rows[:, :11])

    with pytest.raises(AnalysisError, match="non-empty"):
        distribution_compare(real_rows, np.empty((0, 12)))


def _tau_only_surrogate(windows: np.ndarray) -> LinearSurrogate:
    weights = np.zeros((16, 12))
    weights[:, FEATURE_GROUPS["tau"]] = np.random.default_rng(1).standard_normal((16, 4))
    logits = np.einsum("nwf,wf->n", windows, weights)

    # centred so the windows land on both sides of the decision threshold
    return LinearSurrogate(weights, bias=-float(np.median(logits)))


def test_permutation_importance_ranks_the_only_used_group_first(test_arrays):
    windows, _ = test_arrays
    surrogate = _tau_only_surrogate(windows)
    labels = surrogate.predict(windows)

    importances = permutation_importance(surrogate, windows, labels, repeats=5, seed=0)

    assert [item.rank for item in importances] == [1, 2, 3]
    assert importances[0].group == "tau"
    assert importances[0].mean_drop > 0.0

    for item in importances[1:]:
        assert item.mean_drop == 0.0
        assert item.std_drop == 0.0


def test_permutation_importance_is_seeded(small_xgboost, test_arrays):
    windows, labels = test_arrays

    first = permutation_importance(small_xgboost, windows, labels, repeats=3, seed=4)
    second = permutation_importance(small_xgboost, windows, labels, repeats=3, seed=4)

    assert first == second
    assert {item.group for item in first} == {"tau", "p", "g"}


def test_permutation_importance_needs_three_repeats(small_xgboost, test_arrays):
    windows, labels = test_arrays

    with pytest.raises(AnalysisError, match="repeats"):
        permutation_importance(small_xgboost, windows, labels, repeats=2)


def test_permutation_importance_needs_a_trained_model(test_arrays):
    windows, labels = test_arrays
    untrained = BaselineClassifier("knn", object(), window_size=16, hyperparameters={}, seed=0)

    with pytest.raises(AnalysisError, match="not trained"):
        permutation_importance(untrained, windows, labels)


def test_importance_to_frame(small_xgboost, test_arrays):
    windows, labels = test_arrays

    frame = importance_to_frame(permutation_importance(small_xgboost, windows, labels, repeats=3), "xgboost")

    assert list(frame.columns) == ["model", "group", "mean_drop", "std_drop", "rank"]
    assert set(frame["model"]) == {"xgboost"}
    assert sorted(frame["rank"]) == [1, 2, 3]
