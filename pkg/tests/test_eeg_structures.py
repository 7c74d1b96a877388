import hashlib
import json

import numpy as np
import numpy.testing as np_test
import pandas as pd
import pytest

from conftest import FOUR_CONDITIONS, make_recording, make_trialset
from container_io import (
    load_model_container,
    load_recording,
    read_csv,
    read_model_kind,
    save_model_container,
    save_recording,
    write_csv,
)
from eeg_structures import (
    ConditionLabel,
    ConfigurationError,
    ContainerFormatError,
    DecodingTask,
    Outcome,
    Robot,
    SignalShapeError,
    SingleClassError,
    TrialSet,
    project_labels,
)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


def test_recording_rejects_event_outside_data():
    with pytest.raises(SignalShapeError, match="outside"):
        make_recording(np.zeros((2, 10)), onsets=[10])


def test_recording_rejects_duplicate_channel_names():
    with pytest.raises(SignalShapeError, match="unique"):
        make_recording(np.zeros((2, 10)), names=["Cz", "Cz"])


def test_recording_rejects_non_positive_rate():
    with pytest.raises(SignalShapeError, match="invalid sample rate"):
        make_recording(np.zeros((2, 10)), fs=0.0)


def test_recording_data_is_read_only():
    rec = make_recording(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        rec.data[0, 0] = 1.0


def test_trialset_timepoints_must_match_interval():
    with pytest.raises(SignalShapeError, match="timepoints"):
        TrialSet(trials=np.zeros((2, 1, 5)), labels=[0, 1], sample_rate_hz=10.0, interval=(0.0, 1.0))


def test_trialset_labels_are_binary():
    with pytest.raises(SignalShapeError, match="binary"):
        make_trialset(np.zeros((2, 1, 5)), [0, 2], fs=5.0)


@pytest.mark.parametrize("task, expected", [
    (DecodingTask.ERROR_VS_CORRECT, [1, 0, 1, 0]),
    (DecodingTask.NAO_VS_NOHU, [0, 0, 1, 1]),
])
def test_condition_projection(task, expected):
    assert [cond.class_index(task) for cond in FOUR_CONDITIONS] == expected


def test_project_labels_robot_type(four_condition_trials):
    projected = project_labels(four_condition_trials, DecodingTask.NAO_VS_NOHU)
    assert projected.labels.tolist() == [0, 0, 1, 1]


def test_project_labels_robot_filter(four_condition_trials):
    projected = project_labels(four_condition_trials, DecodingTask.ERROR_VS_CORRECT, Robot.NAO)
    assert projected.n_trials == 2
    assert projected.labels.tolist() == [1, 0]
    np_test.assert_array_equal(projected.trials, four_condition_trials.trials[:2])


def test_project_labels_single_class():
    all_nao = (ConditionLabel(Outcome.ERROR, Robot.NAO), ConditionLabel(Outcome.CORRECT, Robot.NAO))
    ts = make_trialset(np.ones((2, 1, 5)), [1, 0], fs=5.0, conditions=all_nao)
    with pytest.raises(SingleClassError, match="single class"):
        project_labels(ts, DecodingTask.NAO_VS_NOHU)


def test_project_labels_needs_conditions():
    ts = make_trialset(np.ones((2, 1, 5)), [1, 0], fs=5.0)
    with pytest.raises(ConfigurationError):
        project_labels(ts, DecodingTask.NAO_VS_NOHU)


def test_project_labels_leaves_signal_untouched(four_condition_trials):
    before = hashlib.sha256(four_condition_trials.trials.tobytes()).hexdigest()
    project_labels(four_condition_trials, DecodingTask.NAO_VS_NOHU)
    project_labels(four_condition_trials, DecodingTask.ERROR_VS_CORRECT, Robot.NOHU)
    assert hashlib.sha256(four_condition_trials.trials.tobytes()).hexdigest() == before


def test_subset_keeps_metadata(four_condition_trials):
    sub = four_condition_trials.subset([3, 0])
    assert sub.conditions == (FOUR_CONDITIONS[3], FOUR_CONDITIONS[0])
    assert sub.labels.tolist() == [0, 1]


# ---------------------------------------------------------------------------
# Recording containers
# ---------------------------------------------------------------------------


def test_recording_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.standard_normal((2, 10)).astype(np.float32)
    rec = make_recording(data, fs=100.0, onsets=[1, 4, 7])
    loaded = load_recording(save_recording(rec, tmp_path / "rec"))
    assert loaded.data.tobytes() == rec.data.tobytes()
    assert loaded.sample_rate_hz == rec.sample_rate_hz
    assert loaded.channel_names == rec.channel_names
    assert loaded.events == rec.events


def test_recording_round_trip_without_events(tmp_path):
    rec = make_recording(np.ones((3, 5), dtype=np.float32))
    loaded = load_recording(save_recording(rec, tmp_path / "rec"))
    assert loaded.events == ()


def test_header_reports_counts(tmp_path):
    n_samples = 1000
    rec = make_recording(np.zeros((128, n_samples), dtype=np.float32), fs=250.0, onsets=range(800))
    path = save_recording(rec, tmp_path / "big")
    header = json.loads((path / "header.json").read_text())
    assert header["format_version"] == 1
    assert header["n_channels"] == 128 and len(header["channel_names"]) == 128
    assert header["sample_rate_hz"] == 250.0
    assert len(header["events"]) == 800
    assert set(header["events"][0]) == {"sample_index", "outcome", "robot"}
    assert (path / "data.f32le").stat().st_size == 128 * n_samples * 4


def test_short_payload_is_rejected(tmp_path):
    path = save_recording(make_recording(np.ones((2, 10), dtype=np.float32)), tmp_path / "rec")
    payload = path / "data.f32le"
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(ContainerFormatError, match="payload size mismatch"):
        load_recording(path)


def _rewrite_header(path, **changes):
    header = json.loads((path / "header.json").read_text())
    header.update(changes)
    (path / "header.json").write_text(json.dumps(header))


def test_zero_sample_rate_is_rejected(tmp_path):
    path = save_recording(make_recording(np.ones((2, 10), dtype=np.float32)), tmp_path / "rec")
    _rewrite_header(path, sample_rate_hz=0)
    with pytest.raises(ContainerFormatError, match="invalid sample rate"):
        load_recording(path)


def test_unknown_version_is_rejected(tmp_path):
    path = save_recording(make_recording(np.ones((2, 10), dtype=np.float32)), tmp_path / "rec")
    _rewrite_header(path, format_version=7)
    with pytest.raises(ContainerFormatError, match="unknown format version"):
        load_recording(path)


def test_missing_header_is_rejected(tmp_path):
    with pytest.raises(ContainerFormatError, match="missing header"):
        load_recording(tmp_path)


# ---------------------------------------------------------------------------
# Model containers and CSV
# ---------------------------------------------------------------------------


def test_model_container_round_trip(tmp_path):
    arrays = {"weights": np.linspace(-1, 1, 6).reshape(2, 3), "index": np.arange(4, dtype=np.int64),
              "half": np.ones(3, dtype=np.float32)}
    save_model_container(tmp_path / "m", "rlda", {"bias": 0.5}, arrays)
    kind, meta, loaded = load_model_container(tmp_path / "m")
    assert kind == "rlda" and meta == {"bias": 0.5}
    assert read_model_kind(tmp_path / "m") == "rlda"
    for name, array in arrays.items():
        assert loaded[name].dtype == array.dtype
        np_test.assert_array_equal(loaded[name], array)


def test_recording_is_not_a_model(tmp_path):
    path = save_recording(make_recording(np.ones((2, 4), dtype=np.float32)), tmp_path / "rec")
    with pytest.raises(ContainerFormatError, match="not a model container"):
        read_model_kind(path)


def test_read_csv_checks_columns(tmp_path):
    path = write_csv(pd.DataFrame({"run_id": ["a"], "accuracy": [0.5]}), tmp_path / "t.csv")
    assert read_csv(path, ("run_id",)).shape == (1, 2)
    with pytest.raises(ContainerFormatError, match="missing columns"):
        read_csv(path, ("run_id", "method"))
