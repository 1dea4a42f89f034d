import pathlib

import numpy as np
import pytest

from grid_adversary.config import FIXTURE_DATASET_PATH, DatasetConfig
from grid_adversary.dataset import (
    CSV_COLUMNS,
    FEATURE_COLUMNS,
    DatasetError,
    GridRecord,
    apply_normalizer,
    augment_symmetry,
    feature_matrix,
    fit_normalizer,
    invert_normalizer,
    load_prepared,
    load_records,
    make_windows,
    prepare_dataset,
    records_to_frame,
    save_prepared,
    split,
    stack_windows,
    windows_to_frame,
)

FIXTURE_STABLE_ROWS = [3, 4, 5, 10, 11, 12, 13, 15, 16, 17, 19, 21, 22, 23, 26, 27, 35, 44, 45, 48, 51, 54, 55, 56, 59]


def _write_csv(tmp_path: pathlib.Path, text: str) -> pathlib.Path:
    path = tmp_path / "grid.csv"
    path.write_text(text, encoding="utf-8")

    return path


@pytest.fixture(scope="module")
def records() -> list[GridRecord]:
    return load_records(FIXTURE_DATASET_PATH)


def test_load_records_reads_the_fixture(records):
    assert len(records) == 64
    assert [i for i, record in enumerate(records) if record.stabf == "stable"] == FIXTURE_STABLE_ROWS
    assert all(record.label == (1 if record.stabf == "stable" else 0) for record in records)
    assert feature_matrix(records).shape == (64, 12)


def test_load_records_round_trips_through_a_frame(tmp_path, records):
    path = tmp_path / "copy.csv"
    records_to_frame(records).to_csv(path, index=False)

    assert load_records(path) == records


def test_load_records_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_records(tmp_path / "missing.csv")


def test_load_records_empty_file(tmp_path):
    with pytest.raises(DatasetError, match="empty"):
        load_records(_write_csv(tmp_path, ""))


def test_load_records_header_only_returns_no_records(tmp_path):
    assert load_records(_write_csv(tmp_path, ",".join(CSV_COLUMNS) + "\n")) == []


def test_load_records_missing_column(tmp_path):
    header = ",".join(column for column in CSV_COLUMNS if column != "g4")

    with pytest.raises(DatasetError, match="g4"):
        load_records(_write_csv(tmp_path, header + "\n"))


def test_load_records_non_numeric_cell(tmp_path):
    row = ["1.0"] * 12 + ["0.01", "unstable"]
    row[5] = "abc"

    with pytest.raises(DatasetError, match="non-numeric value 'abc' in column 'p2'"):
        load_records(_write_csv(tmp_path, ",".join(CSV_COLUMNS) + "\n" + ",".join(row) + "\n"))


def test_load_records_unknown_label(tmp_path):
    row = ["1.0"] * 12 + ["0.01", "maybe"]

    with pytest.raises(DatasetError, match="unknown stability labels"):
        load_records(_write_csv(tmp_path, ",".join(CSV_COLUMNS) + "\n" + ",".join(row) + "\n"))


def test_augment_symmetry_is_sixfold_and_keeps_labels(records):
    augmented = augment_symmetry(records)

    assert len(augmented) == 6 * len(records)

    for i, record in enumerate(records):
        copies = augmented[6 * i : 6 * i + 6]

        assert copies[0] == record
        assert {copy.stabf for copy in copies} == {record.stabf}
        assert {copy.stab for copy in copies} == {record.stab}
        # the producer node never moves
        assert {(copy.tau[0], copy.p[0], copy.g[0]) for copy in copies} == {(record.tau[0], record.p[0], record.g[0])}
        assert sorted(copy.tau[1:] for copy in copies) == sorted(
            (record.tau[a], record.tau[b], record.tau[c])
            for a, b, c in [(1, 2, 3), (1, 3, 2), (2, 1, 3), (2, 3, 1), (3, 1, 2), (3, 2, 1)]
        )


def test_augment_symmetry_permutes_node_features_together(records):
    for copy in augment_symmetry(records[:1]):
        # node identity follows the same permutation for tau, p and g
        original_nodes = {(records[0].tau[i], records[0].p[i], records[0].g[i]) for i in range(4)}
        assert {(copy.tau[i], copy.p[i], copy.g[i]) for i in range(4)} == original_nodes


def test_augment_symmetry_rejects_empty_input():
    with pytest.raises(DatasetError):
        augment_symmetry([])


def test_normalizer_round_trip(records):
    values = feature_matrix(records)
    params = fit_normalizer(values)
    normalized = apply_normalizer(params, values)

    assert normalized.min() == 0.0
    assert normalized.max() == 1.0
    np.testing.assert_allclose(invert_normalizer(params, normalized), values, rtol=1e-9, atol=1e-9)


def test_normalizer_clamps_out_of_range_values(records):
    values = feature_matrix(records)
    params = fit_normalizer(values)

    normalized = apply_normalizer(params, np.stack([values.min(axis=0) - 10, values.max(axis=0) + 10]))

    np.testing.assert_array_equal(normalized[0], np.zeros(12))
    np.testing.assert_array_equal(normalized[1], np.ones(12))


def test_normalizer_maps_constant_features_to_zero(records):
    values = feature_matrix(records)
    values[:, 0] = 3.0
    params = fit_normalizer(values)

    assert params.constant_features == ["tau1"]
    np.testing.assert_array_equal(apply_normalizer(params, values)[:, 0], np.zeros(len(values)))


def test_normalizer_rejects_zero_rows():
    with pytest.raises(DatasetError):
        fit_normalizer(np.empty((0, 12)))


def test_make_windows_labels_come_from_the_last_row(records):
    windows = make_windows(records, window_size=16, step=8)

    assert len(windows) == 7
    assert [window.index for window in windows] == list(range(7))

    for window in windows:
        last_row = window.index * 8 + 15
        assert window.label == records[last_row].label
        np.testing.assert_array_equal(window.values, feature_matrix(records[window.index * 8 : last_row + 1]))


def test_make_windows_count_on_augmented_rows(records):
    # 384 rows, (384 - 16) // 8 + 1
    assert len(make_windows(augment_symmetry(records))) == 47


def test_make_windows_with_too_few_rows(records):
    with pytest.raises(DatasetError, match="insufficient rows"):
        make_windows(records[:15], window_size=16)


def test_split_sizes_and_disjointness(records):
    windows = make_windows(augment_symmetry(records))
    result = split(windows, (0.75, 0.05, 0.20), seed=42)

    assert (len(result.train), len(result.validation), len(result.test)) == (36, 2, 9)

    indices = [window.index for subset in result.subsets().values() for window in subset]
    assert sorted(indices) == list(range(47))


def test_split_is_deterministic_per_seed(records):
    windows = make_windows(augment_symmetry(records))

    first = split(windows, seed=7)
    second = split(windows, seed=7)
    other = split(windows, seed=8)

    assert [w.index for w in first.test] == [w.index for w in second.test]
    assert [w.index for w in first.train] != [w.index for w in other.train]


def test_split_rejects_bad_ratios(records):
    windows = make_windows(augment_symmetry(records))

    with pytest.raises(DatasetError, match="sum to 1"):
        split(windows, (0.7, 0.1, 0.1))


def test_split_empty_validation_needs_explicit_permission(records):
    windows = make_windows(records)

    with pytest.raises(DatasetError):
        split(windows, (0.8, 0.0, 0.2))

    result = split(windows, (0.8, 0.0, 0.2), allow_empty_validation=True)

    assert result.validation == []
    assert len(result.train) + len(result.test) == 7


def test_prepare_dataset_fits_the_normalizer_on_training_rows(prepared):
    train_values, _ = stack_windows(prepared.split.train)
    test_values, _ = stack_windows(prepared.split.test)

    assert train_values.shape == (36, 16, 12)
    assert test_values.min() >= 0.0
    assert test_values.max() <= 1.0

    rows = train_values.reshape(-1, 12)
    constant = prepared.normalization.constant_features
    non_constant = [i for i, column in enumerate(FEATURE_COLUMNS) if column not in constant]
    np.testing.assert_allclose(rows.min(axis=0)[non_constant], 0.0, atol=1e-12)
    np.testing.assert_allclose(rows.max(axis=0)[non_constant], 1.0, atol=1e-12)


def test_prepare_dataset_without_augmentation_cannot_fill_the_validation_set():
    with pytest.raises(DatasetError):
        prepare_dataset(DatasetConfig(augment=False))


def test_save_and_load_prepared(tmp_path, prepared):
    save_prepared(prepared, tmp_path)
    loaded = load_prepared(tmp_path)

    assert loaded.normalization == prepared.normalization
    assert loaded.window_size == 16
    assert loaded.step == 8

    for name, windows in prepared.split.subsets().items():
        loaded_windows = loaded.split.subsets()[name]
        assert [w.index for w in loaded_windows] == [w.index for w in windows]
        np.testing.assert_array_equal(stack_windows(loaded_windows)[0], stack_windows(windows)[0])


def test_load_prepared_from_an_empty_directory(tmp_path):
    with pytest.raises(DatasetError, match="prepare-data"):
        load_prepared(tmp_path)


def test_windows_to_frame_is_in_the_dataset_schema(prepared, test_arrays):
    values, labels = test_arrays
    frame = windows_to_frame(values, prepared.normalization, labels)

    assert list(frame.columns) == ["window", *CSV_COLUMNS]
    assert len(frame) == len(values) * 16
    assert frame["stab"].isna().all()
    assert set(frame["stabf"]) <= {"stable", "unstable"}
    np.testing.assert_allclose(
        frame[FEATURE_COLUMNS].to_numpy()[:16], invert_normalizer(prepared.normalization, values[0]), rtol=1e-12
    )
