from dataclasses import replace

import numpy as np
import numpy.testing as np_test
import pytest
from scipy import linalg

from conftest import make_recording, make_trialset
from classical_decoders import (
    CSPModel,
    FBCSPConfig,
    csp_features,
    fbcsp_band_sets,
    filter_bank_epochs,
    fit_csp,
    fit_csp_from_covariances,
    fit_fbcsp_bands,
    fit_rlda,
    ledoit_wolf,
    load_fbcsp,
    load_rlda,
    mibif_select,
    mutual_information_scores,
    predict_fbcsp,
    predict_rlda,
    save_fbcsp,
    save_rlda,
    time_domain_features,
)
from eeg_structures import ConfigurationError, ModelFitError, SignalShapeError, SingleClassError
from signal_filters import make_filter_bank


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


# ---------------------------------------------------------------------------
# CSP
# ---------------------------------------------------------------------------


def test_identical_class_statistics_give_half_eigenvalues(rng):
    cov = random_spd(rng, 4)
    model = fit_csp_from_covariances(cov, cov, n_pairs=2)
    np_test.assert_allclose(model.eigenvalues, 0.5, atol=1e-6)


def test_diagonal_problem_matches_dense_solver():
    c1, c2 = np.diag([4.0, 1.0, 1.0]), np.diag([1.0, 1.0, 4.0])
    model = fit_csp_from_covariances(c1, c2, n_pairs=1)
    oracle = np.sort(np.real(np.linalg.eigvals(np.linalg.solve(c1 + c2, c1))))[::-1]
    np_test.assert_allclose(model.eigenvalues, oracle, atol=1e-8)
    np_test.assert_allclose(model.eigenvalues, [0.8, 0.5, 0.2], atol=1e-8)


def test_csp_whitens_composite_covariance(rng):
    c1, c2 = random_spd(rng, 5), random_spd(rng, 5)
    model = fit_csp_from_covariances(c1, c2, n_pairs=2)
    whitened = model.filters.T @ (c1 + c2) @ model.filters
    assert np.max(np.abs(whitened - np.eye(5))) < 1e-6
    assert np.all(np.diff(model.eigenvalues) <= 0)


def _variance_trials(rng, n_trials, scale_ch0):
    trials = rng.standard_normal((n_trials, 2, 100))
    trials[:, 0] *= np.sqrt(scale_ch0)
    return trials


def test_top_filter_captures_class_one_variance(rng):
    trials = np.concatenate([_variance_trials(rng, 40, 10.0), _variance_trials(rng, 40, 1.0)])
    labels = np.r_[np.ones(40), np.zeros(40)]
    train = np.r_[0:30, 40:70]
    ts = make_trialset(trials[train], labels[train], fs=100.0)
    model = fit_csp(ts, n_pairs=1)

    top = model.filters[:, 0]
    var1 = np.mean([np.var(top @ trial) for trial in trials[30:40]])
    var0 = np.mean([np.var(top @ trial) for trial in trials[70:80]])
    assert var1 / (var1 + var0) > 0.85


def test_csp_is_scale_invariant(rng):
    trials = rng.standard_normal((20, 3, 50))
    trials[::2, 1] *= 3.0
    labels = np.tile([1, 0], 10)
    base = fit_csp(make_trialset(trials, labels, fs=10.0), n_pairs=1)
    scaled = fit_csp(make_trialset(trials * 7.0, labels, fs=10.0), n_pairs=1)
    np_test.assert_allclose(scaled.eigenvalues, base.eigenvalues, atol=1e-9)
    for j in range(3):
        cosine = abs(base.filters[:, j] @ scaled.filters[:, j]) / (
            np.linalg.norm(base.filters[:, j]) * np.linalg.norm(scaled.filters[:, j]))
        assert cosine == pytest.approx(1.0, abs=1e-9)


def test_csp_needs_both_classes(rng):
    ts = make_trialset(rng.standard_normal((4, 2, 20)), [1, 1, 1, 1], fs=10.0)
    with pytest.raises(SingleClassError):
        fit_csp(ts, n_pairs=1)


def test_csp_pairs_limited_by_channels(rng):
    with pytest.raises(ConfigurationError):
        fit_csp_from_covariances(np.eye(3), np.eye(3), n_pairs=2)


# ---------------------------------------------------------------------------
# CSP features
# ---------------------------------------------------------------------------


def identity_csp():
    return CSPModel(filters=np.eye(2), eigenvalues=np.array([0.6, 0.4]), n_pairs=1)


def test_log_variance_by_hand():
    trial = np.array([[[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 2.0, 2.0]]])
    features = csp_features(identity_csp(), make_trialset(trial, [1], fs=4.0))
    # variances 1.25 and 1.0
    np_test.assert_allclose(features[0], [np.log(1.25 / 2.25), np.log(1.0 / 2.25)], atol=1e-12)


def test_duplicated_trial_gives_identical_rows(rng):
    trial = rng.standard_normal((1, 2, 8))
    features = csp_features(identity_csp(), make_trialset(np.vstack([trial, trial]), [1, 0], fs=8.0))
    np_test.assert_array_equal(features[0], features[1])


def test_zero_trial_has_zero_variance():
    with pytest.raises(ModelFitError, match="zero variance"):
        csp_features(identity_csp(), make_trialset(np.zeros((1, 2, 4)), [0], fs=4.0))


def test_channel_mismatch(rng):
    with pytest.raises(SignalShapeError):
        csp_features(identity_csp(), make_trialset(rng.standard_normal((1, 3, 4)), [0], fs=4.0))


# ---------------------------------------------------------------------------
# MIBIF
# ---------------------------------------------------------------------------


def brute_force_mi(column, labels, n_bins=10):
    if np.ptp(column) == 0:
        return 0.0
    edges = np.linspace(column.min(), column.max(), n_bins + 1)
    binned = np.clip(np.searchsorted(edges, column, side="right") - 1, 0, n_bins - 1)
    mi = 0.0
    for b in np.unique(binned):
        for y in (0, 1):
            p_xy = np.mean((binned == b) & (labels == y))
            if p_xy > 0:
                mi += p_xy * np.log(p_xy / (np.mean(binned == b) * np.mean(labels == y)))
    return mi


def test_perfect_separator_is_selected(rng):
    labels = np.tile([0, 1], 50)
    features = rng.standard_normal((100, 3))
    features[:, 1] = labels * 5.0 + rng.standard_normal(100) * 0.1
    assert mibif_select(features, labels, 1).tolist() == [1]


def test_ties_prefer_lower_index(rng):
    column = rng.standard_normal(40)
    features = np.column_stack([column] * 4)
    assert mibif_select(features, np.tile([0, 1], 20), 2).tolist() == [0, 1]


def test_selection_matches_brute_force(rng):
    labels = np.tile([0, 1], 100)
    features = rng.standard_normal((200, 4))
    for j, shift in enumerate([0.2, 2.0, 0.0, 1.0]):
        features[:, j] += labels * shift
    scores = mutual_information_scores(features, labels)
    oracle = np.array([brute_force_mi(features[:, j], labels) for j in range(4)])
    np_test.assert_allclose(scores, oracle, atol=1e-10)
    expected = sorted(range(4), key=lambda j: (-oracle[j], j))
    assert mibif_select(features, labels, 4).tolist() == expected
    assert expected[0] == 1


def test_constant_feature_scores_zero(rng):
    features = np.column_stack([np.ones(20), rng.standard_normal(20)])
    assert mutual_information_scores(features, np.tile([0, 1], 10))[0] == 0.0


def test_cannot_select_more_than_available(rng):
    with pytest.raises(ConfigurationError):
        mibif_select(rng.standard_normal((10, 3)), np.tile([0, 1], 5), 4)


# ---------------------------------------------------------------------------
# Ledoit-Wolf
# ---------------------------------------------------------------------------


def test_large_sample_barely_shrinks(rng):
    true_cov = np.diag([1.0, 2.0, 3.0, 4.0, 5.0])
    samples = rng.multivariate_normal(np.zeros(5), true_cov, size=5000)
    covariance, gamma = ledoit_wolf(samples)
    assert gamma < 0.1
    np_test.assert_allclose(covariance, np.cov(samples, rowvar=False, bias=True), atol=0.05)


def test_undersampled_regime_shrinks_heavily(rng):
    covariance, gamma = ledoit_wolf(rng.standard_normal((10, 50)))
    assert gamma > 0.7
    assert np.linalg.cond(covariance) < 1e3


def test_isotropic_samples_stay_isotropic():
    a = 3.0
    samples = np.vstack([a * np.eye(3), -a * np.eye(3)])
    covariance, gamma = ledoit_wolf(samples)
    np_test.assert_allclose(covariance, a ** 2 / 3 * np.eye(3), atol=1e-6)
    assert 0.0 <= gamma <= 1.0


def test_shrunk_eigenvalues_bounded_below(rng):
    samples = rng.standard_normal((30, 8)) @ rng.standard_normal((8, 8))
    covariance, gamma = ledoit_wolf(samples)
    sample_cov = np.cov(samples, rowvar=False, bias=True)
    assert np.min(linalg.eigvalsh(covariance)) >= (1 - gamma) * np.min(linalg.eigvalsh(sample_cov)) - 1e-12
    np_test.assert_allclose(covariance, covariance.T)


def _ledoit_wolf_oracle(samples, assume_centered=False):
    """Closed form written out in plain numpy."""
    x = samples if assume_centered else samples - samples.mean(axis=0)
    n, d = x.shape
    s = x.T @ x / n
    mu = np.trace(s) / d
    target = mu * np.eye(d)
    d2 = np.sum((s - target) ** 2) / d
    b2_bar = sum(np.sum((np.outer(row, row) - s) ** 2) for row in x) / (n ** 2 * d)
    b2 = min(b2_bar, d2)
    gamma = 0.0 if b2 == 0 else b2 / d2
    return (1 - gamma) * s + gamma * target, gamma


@pytest.mark.parametrize("seed, n, d, assume_centered", [
    (0, 10, 50, False),
    (1, 40, 6, False),
    (2, 200, 12, False),
    (3, 3, 3, False),
    (4, 25, 25, True),
    (5, 2, 50, True),
])
def test_matches_closed_form(seed, n, d, assume_centered):
    gen = np.random.default_rng(seed)
    samples = gen.standard_normal((n, d)) @ gen.standard_normal((d, d)) + gen.standard_normal(d)
    covariance, gamma = ledoit_wolf(samples, assume_centered=assume_centered)
    expected_cov, expected_gamma = _ledoit_wolf_oracle(samples, assume_centered)
    assert gamma == pytest.approx(expected_gamma, abs=1e-8)
    np_test.assert_allclose(covariance, expected_cov, rtol=1e-8, atol=1e-8)


def test_intensity_stays_in_unit_interval():
    gen = np.random.default_rng(2024)
    for _ in range(1000):
        n, d = int(gen.integers(2, 31)), int(gen.integers(1, 21))
        scales = np.exp(gen.uniform(-3, 3, size=d))
        _, gamma = ledoit_wolf(gen.standard_normal((n, d)) * scales)
        assert 0.0 <= gamma <= 1.0


def test_two_uncentred_samples_in_fifty_dimensions(rng):
    samples = rng.standard_normal((2, 50))
    covariance, gamma = ledoit_wolf(samples, assume_centered=True)
    assert 0.3 < gamma < 0.7
    assert np.linalg.cond(covariance) < 1e3
    # centring two samples leaves nothing to estimate the shrinkage from
    assert ledoit_wolf(samples)[1] == pytest.approx(0.0, abs=1e-10)


def test_ledoit_wolf_needs_two_samples():
    with pytest.raises(ModelFitError):
        ledoit_wolf(np.ones((1, 3)))


# ---------------------------------------------------------------------------
# rLDA
# ---------------------------------------------------------------------------


def test_closed_form_example():
    cloud = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    features = np.vstack([cloud, cloud + [2.0, 0.0]])
    labels = np.r_[np.zeros(4), np.ones(4)]
    model = fit_rlda(features, labels, shrinkage=0.0)
    assert model.weights[0] > 0
    assert model.weights[1] == pytest.approx(0.0, abs=1e-12)
    assert -model.bias / model.weights[0] == pytest.approx(1.0)
    assert predict_rlda(model, np.array([[0.9, 0.0], [1.1, 0.0]])).tolist() == [0, 1]


def _clouds(rng, n, shift, d=5):
    labels = np.tile([0, 1], n // 2)
    return rng.standard_normal((n, d)) + labels[:, None] * shift, labels


def test_separated_clouds(rng):
    x_train, y_train = _clouds(rng, 200, 3.0)
    x_test, y_test = _clouds(rng, 400, 3.0)
    model = fit_rlda(x_train, y_train)
    assert np.mean(predict_rlda(model, x_test) == y_test) > 0.95
    assert 0.0 <= model.shrinkage_gamma <= 1.0


def test_no_signal_is_chance(rng):
    x_train, y_train = _clouds(rng, 2000, 0.0)
    x_test, y_test = _clouds(rng, 4000, 0.0)
    accuracy = np.mean(predict_rlda(fit_rlda(x_train, y_train), x_test) == y_test)
    assert abs(accuracy - 0.5) < 0.05


def test_affine_map_leaves_predictions_unchanged(rng):
    x_train, y_train = _clouds(rng, 100, 1.0, d=3)
    x_test, _ = _clouds(rng, 50, 1.0, d=3)
    a = np.array([[2.0, 0.5, 0.0], [0.0, 1.0, -0.3], [0.1, 0.0, 3.0]])
    b = np.array([5.0, -2.0, 1.0])
    base = predict_rlda(fit_rlda(x_train, y_train, shrinkage=0.0), x_test)
    mapped = predict_rlda(fit_rlda(x_train @ a.T + b, y_train, shrinkage=0.0), x_test @ a.T + b)
    np_test.assert_array_equal(mapped, base)


def test_rlda_single_class(rng):
    with pytest.raises(SingleClassError, match="single class"):
        fit_rlda(rng.standard_normal((6, 2)), np.ones(6))


def test_rlda_rejects_non_finite():
    features = np.array([[0.0, 1.0], [np.nan, 0.0], [1.0, 1.0], [2.0, 0.0]])
    with pytest.raises(ModelFitError, match="non-finite"):
        fit_rlda(features, [0, 0, 1, 1])


def test_rlda_save_load(tmp_path, rng):
    x, y = _clouds(rng, 40, 2.0)
    model = fit_rlda(x, y)
    loaded, _ = load_rlda(save_rlda(model, tmp_path / "rlda"))
    np_test.assert_array_equal(predict_rlda(loaded, x), predict_rlda(model, x))


# ---------------------------------------------------------------------------
# Time-domain features
# ---------------------------------------------------------------------------


def test_constant_trial_features():
    ts = make_trialset(np.full((2, 3, 20), 4.25), [0, 1], fs=10.0)
    np_test.assert_array_equal(time_domain_features(ts, 0.5), 4.25)


def test_full_window_gives_channel_means(rng):
    trials = rng.standard_normal((3, 4, 10))
    ts = make_trialset(trials, [0, 1, 0], fs=10.0)
    np_test.assert_allclose(time_domain_features(ts, 1.0), trials.mean(axis=2))


def test_half_means_by_hand():
    trial = np.arange(10.0).reshape(1, 1, 10)
    ts = make_trialset(trial, [1], fs=10.0)
    np_test.assert_allclose(time_domain_features(ts, 0.5), [[2.0, 7.0]])


def test_long_interval_feature_count():
    ts = make_trialset(np.zeros((1, 128, 1750), dtype=np.float32), [0], fs=250.0)
    assert time_domain_features(ts, 0.1).shape == (1, 8960)


def test_window_longer_than_trial():
    ts = make_trialset(np.zeros((1, 1, 10)), [0], fs=10.0)
    with pytest.raises(SignalShapeError):
        time_domain_features(ts, 2.0)


# ---------------------------------------------------------------------------
# FB-CSP
# ---------------------------------------------------------------------------

FS = 100.0
TRIAL_S = 2.0
N_TRIALS = 60


def make_alpha_recording(n_trials=N_TRIALS, seed=7):
    """8 channels; class-1 trials carry extra 10 Hz power on channels 0 and 1."""
    rng = np.random.default_rng(seed)
    spacing = int(3 * FS)
    onsets = [int(FS) + k * spacing for k in range(n_trials)]
    data = rng.standard_normal((8, onsets[-1] + spacing))
    t = np.arange(int(TRIAL_S * FS)) / FS
    for k, onset in enumerate(onsets):
        if k % 2 == 0:  # ERROR conditions come first in the cycle
            for ch in (0, 1):
                phase = rng.uniform(0, 2 * np.pi)
                data[ch, onset:onset + t.size] += 2.0 * np.sin(2 * np.pi * 10.0 * t + phase)
    return make_recording(data, fs=FS, onsets=onsets)


@pytest.fixture(scope="module")
def alpha_recording():
    return make_alpha_recording()


@pytest.fixture(scope="module")
def small_bank():
    return make_filter_bank(stop_hz=42.5, n_bands=17)


def _split(band_sets, indices):
    return [(b, ts.subset(indices)) for b, ts in band_sets]


def test_fbcsp_finds_alpha_bands(alpha_recording, small_bank):
    band_sets = filter_bank_epochs(alpha_recording, small_bank, (0.0, TRIAL_S))
    assert len(band_sets) == 17
    train, test = np.arange(40), np.arange(40, N_TRIALS)
    config = FBCSPConfig(n_pairs=2, n_selected=4)
    model = fit_fbcsp_bands(_split(band_sets, train), small_bank, config)

    test_sets = _split(band_sets, test)
    accuracy = np.mean(predict_fbcsp(model, test_sets) == test_sets[0][1].labels)
    assert accuracy > 0.9
    for band, _ in model.selected_features:
        lo, hi = small_bank.bands[band]
        assert lo < 12.0 and hi > 8.0


def test_fbcsp_is_deterministic_and_round_trips(tmp_path, alpha_recording, small_bank):
    config = FBCSPConfig(n_pairs=2, n_selected=4, max_workers=3)
    band_sets = filter_bank_epochs(alpha_recording, small_bank, (0.0, TRIAL_S), max_workers=3)
    first = save_fbcsp(fit_fbcsp_bands(band_sets, small_bank, config), tmp_path / "a")
    second = save_fbcsp(fit_fbcsp_bands(band_sets, small_bank, config), tmp_path / "b")
    assert sorted(p.name for p in first.iterdir()) == sorted(p.name for p in second.iterdir())
    for a, b in zip(sorted(first.iterdir()), sorted(second.iterdir())):
        assert a.read_bytes() == b.read_bytes()

    loaded, _ = load_fbcsp(first)
    unseen = fbcsp_band_sets(loaded, alpha_recording)
    np_test.assert_array_equal(predict_fbcsp(loaded, unseen), predict_fbcsp(loaded, band_sets))


def test_shuffled_labels_predict_at_chance(small_bank):
    band_sets = filter_bank_epochs(make_alpha_recording(500, seed=11), small_bank, (0.0, TRIAL_S), max_workers=4)
    labels = band_sets[0][1].labels
    train, test = np.arange(100), np.arange(100, 500)
    gen = np.random.default_rng(3)
    hits = []
    for _ in range(5):
        shuffled = gen.permutation(labels)
        relabelled = [(b, replace(ts, labels=shuffled)) for b, ts in band_sets]
        model = fit_fbcsp_bands(_split(relabelled, train), small_bank, FBCSPConfig(n_pairs=2, n_selected=4))
        hits.append(predict_fbcsp(model, _split(relabelled, test)) == shuffled[test])
    assert abs(np.mean(hits) - 0.5) < 0.05


def test_fbcsp_selection_budget(alpha_recording, small_bank):
    band_sets = filter_bank_epochs(alpha_recording, small_bank, (0.0, TRIAL_S), band_indices=[4])
    with pytest.raises(ConfigurationError):
        fit_fbcsp_bands(band_sets, small_bank, FBCSPConfig(n_pairs=2, n_selected=5))


def test_bands_above_nyquist_are_skipped(alpha_recording):
    bank = make_filter_bank(stop_hz=60.5, n_bands=20)
    band_sets = filter_bank_epochs(alpha_recording, bank, (0.0, TRIAL_S), band_indices=[0, 19])
    assert [b for b, _ in band_sets] == [0]
