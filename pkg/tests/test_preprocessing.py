import numpy as np
import numpy.testing as np_test
import pytest

from conftest import make_recording
from eeg_structures import ConfigurationError, SignalShapeError
from preprocessing import (
    LATE_INTERVAL_S,
    LONG_INTERVAL_S,
    StandardizationConfig,
    common_average_reference,
    epoch_trials,
    ewm_standardize,
    resample,
)


def ewm_oracle(x, decay, mean0, var0):
    out = np.empty_like(x)
    m, v = mean0, var0
    for t, value in enumerate(x):
        m = (1 - decay) * m + decay * value
        v = (1 - decay) * v + decay * (value - m) ** 2
        out[t] = (value - m) / max(np.sqrt(v), 1e-4)
    return out


# ---------------------------------------------------------------------------
# Common average reference
# ---------------------------------------------------------------------------


def test_car_of_identical_channels_is_zero():
    out = common_average_reference(make_recording(np.full((4, 20), 5.0)))
    np_test.assert_array_equal(out.data, np.zeros((4, 20)))


def test_car_keeps_referenced_data():
    data = np.array([[1.0, -2.0, 3.0], [-1.0, 2.0, -3.0]])
    np_test.assert_allclose(common_average_reference(make_recording(data)).data, data)


def test_car_matches_direct_oracle(rng):
    data = rng.standard_normal((3, 4))
    out = common_average_reference(make_recording(data))
    np_test.assert_allclose(out.data, data - data.mean(axis=0), atol=1e-15)
    assert np.all(np.abs(out.data.mean(axis=0)) < 1e-6 * np.sqrt(np.mean(data ** 2)))


def test_car_needs_two_channels():
    with pytest.raises(SignalShapeError, match="single-channel"):
        common_average_reference(make_recording(np.ones((1, 5))))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def test_resample_identity_ratio(rng):
    rec = make_recording(rng.standard_normal((2, 50)), fs=250.0)
    out = resample(rec, 250.0)
    np_test.assert_array_equal(out.data, rec.data)


def test_resample_preserves_passband_sine():
    t = np.arange(4000) / 1000.0
    rec = make_recording(np.sin(2 * np.pi * 10 * t)[None, :], fs=1000.0)
    out = resample(rec, 250.0)
    assert out.sample_rate_hz == 250.0
    assert out.n_samples == 1000
    expected = np.sin(2 * np.pi * 10 * np.arange(1000) / 250.0)
    central = slice(100, 900)
    assert np.max(np.abs(out.data[0, central] - expected[central])) < 0.01


def test_resample_attenuates_above_new_nyquist():
    t = np.arange(4000) / 1000.0
    rec = make_recording(np.sin(2 * np.pi * 200 * t)[None, :], fs=1000.0)
    out = resample(rec, 250.0)
    central = out.data[0, 100:900]
    assert np.sqrt(np.mean(central ** 2)) < 0.05


def test_resample_rescales_events():
    rec = make_recording(np.zeros((2, 400)), fs=1000.0, onsets=[10, 14, 398])
    out = resample(rec, 250.0)
    # 2.5 rounds to even, 3.5 as well; the last index is clamped into range.
    assert [ev.sample_index for ev in out.events] == [2, 4, 99]
    assert out.n_samples == 100


def test_resample_rejects_non_positive_rate():
    with pytest.raises(ConfigurationError):
        resample(make_recording(np.zeros((2, 10))), 0.0)


# ---------------------------------------------------------------------------
# Exponential moving standardization
# ---------------------------------------------------------------------------


def test_ewm_matches_recursion_oracle(rng):
    x = rng.standard_normal(20) * 3.0 + 1.0
    cfg = StandardizationConfig(decay=0.5, eps=1e-4, init_block_s=0.5)
    out = ewm_standardize(make_recording(x[None, :], fs=10.0), cfg)
    expected = ewm_oracle(x, 0.5, x[:5].mean(), x[:5].var())
    np_test.assert_allclose(out.data[0], expected, rtol=1e-12, atol=1e-12)


def test_ewm_without_init_block_seeds_with_first_sample(rng):
    x = rng.standard_normal(30)
    cfg = StandardizationConfig(decay=0.2, init_block_s=0.0)
    out = ewm_standardize(make_recording(x[None, :], fs=10.0), cfg)
    np_test.assert_allclose(out.data[0], ewm_oracle(x, 0.2, x[0], 0.0), rtol=1e-12, atol=1e-12)


def test_ewm_of_constant_signal_is_zero():
    out = ewm_standardize(make_recording(np.full((2, 2000), 7.5), fs=250.0))
    np_test.assert_allclose(out.data, 0.0, atol=1e-9)


def test_ewm_adapts_to_amplitude_step(rng):
    n = 10_000
    x = rng.standard_normal(n)
    x[n // 2:] *= 2.0
    out = ewm_standardize(make_recording(x[None, :], fs=250.0))
    assert 0.5 <= out.data[0, -n // 4:].std() <= 2.0


@pytest.mark.parametrize("kwargs", [{"decay": 0.0}, {"decay": 1.0}, {"eps": 0.0}, {"init_block_s": -1.0}])
def test_standardization_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        StandardizationConfig(**kwargs)


# ---------------------------------------------------------------------------
# Epoching
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("interval, n_timepoints", [(LONG_INTERVAL_S, 1750), (LATE_INTERVAL_S, 750)])
def test_decoding_interval_lengths(interval, n_timepoints):
    rec = make_recording(np.zeros((2, 3000)), fs=250.0, onsets=[0, 1000])
    ts = epoch_trials(rec, interval)
    assert ts.trials.shape == (2, 2, n_timepoints)


def test_epoch_out_of_bounds_names_event():
    rec = make_recording(np.zeros((2, 1000)), fs=250.0, onsets=[0])
    with pytest.raises(SignalShapeError, match="event 0"):
        epoch_trials(rec, (-1.0, 2.0))


def test_epoch_is_pure_slicing(rng):
    data = rng.standard_normal((3, 200))
    rec = make_recording(data, fs=10.0, onsets=[20, 100])
    ts = epoch_trials(rec, (-1.0, 2.0))
    np_test.assert_array_equal(ts.trials[0], data[:, 10:40])
    np_test.assert_array_equal(ts.trials[1], data[:, 90:120])
    assert ts.labels.tolist() == [1, 0]


def test_epoch_drops_trials_overlapping_mask():
    rec = make_recording(np.zeros((2, 100)), fs=10.0, onsets=[10, 30, 50, 70])
    mask = np.zeros(100, dtype=bool)
    mask[35] = True
    ts = epoch_trials(rec, (0.0, 1.0), rejection_mask=mask)
    assert ts.n_trials == 3
    assert ts.event_indices == (0, 2, 3)


def test_epoch_fails_when_everything_is_rejected():
    rec = make_recording(np.zeros((2, 100)), fs=10.0, onsets=[10])
    with pytest.raises(SignalShapeError, match="all trials rejected"):
        epoch_trials(rec, (0.0, 1.0), rejection_mask=np.ones(100, dtype=bool))
