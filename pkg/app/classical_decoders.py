"""
Classical Decoders - CSP, Ledoit-Wolf, rLDA, MIBIF e FB-CSP

Implementa os dois decodificadores clássicos:
  * rLDA sobre médias de janelas no domínio do tempo, com shrinkage
    Ledoit-Wolf da covariância;
  * FB-CSP: banco de filtros passa-banda, CSP por banda, seleção de
    features por informação mútua (MIBIF) e rLDA nas features escolhidas.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.covariance import ledoit_wolf as sklearn_ledoit_wolf
from sklearn.metrics import mutual_info_score

from container_io import PathLike, load_model_container, save_model_container, write_csv
from eeg_structures import (
    ConfigurationError,
    ModelFitError,
    Recording,
    SignalShapeError,
    SingleClassError,
    TrialSet,
)
from preprocessing import epoch_trials
from signal_filters import FilterBankSpec, FilterKind, apply_iir, design_butterworth

logger = logging.getLogger(__name__)

RIDGE_FACTOR = 1e-10
MI_BINS = 10


@dataclass
class CSPModel:
    """Filtros espaciais (colunas) ordenados por autovalor decrescente."""
    filters: np.ndarray
    eigenvalues: np.ndarray
    n_pairs: int

    @property
    def n_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_indices(self) -> np.ndarray:
        """Columns used for features: the first and the last ``n_pairs``."""
        n = self.filters.shape[1]
        return np.concatenate([np.arange(self.n_pairs), np.arange(n - self.n_pairs, n)])

    @property
    def selected_filters(self) -> np.ndarray:
        return self.filters[:, self.filter_indices]


@dataclass
class RLDAModel:
    """Discriminante linear regularizado: score = w.x + bias, classe 1 se score > 0."""
    weights: np.ndarray
    bias: float
    shrinkage_gamma: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ModelFitError("rLDA produced non-finite weights")
        if not 0.0 <= self.shrinkage_gamma <= 1.0:
            raise ModelFitError(f"shrinkage gamma {self.shrinkage_gamma} outside [0, 1]")


@dataclass
class FBCSPConfig:
    """Parâmetros do FB-CSP."""
    n_pairs: int = 2
    n_selected: int = 8
    filter_order: int = 8
    mi_bins: int = MI_BINS
    zero_phase: bool = False
    shrinkage: Optional[float] = None
    max_workers: int = 1

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigurationError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.n_selected < 1:
            raise ConfigurationError(f"n_selected must be >= 1, got {self.n_selected}")
        if self.mi_bins < 2:
            raise ConfigurationError(f"mi_bins must be >= 2, got {self.mi_bins}")
        if self.max_workers < 1:
            raise ConfigurationError(f"max_workers must be >= 1, got {self.max_workers}")


@dataclass
class FBCSPModel:
    """Everything needed to classify unseen recordings with FB-CSP."""
    bank: FilterBankSpec
    band_indices: Tuple[int, ...]
    csp_models: List[CSPModel]
    selected_features: List[Tuple[int, int]]
    classifier: RLDAModel
    interval: Tuple[float, float]
    sample_rate_hz: float
    config: FBCSPConfig = field(default_factory=FBCSPConfig)

    def __post_init__(self):
        if len(set(self.selected_features)) != len(self.selected_features):
            raise ModelFitError("selected FB-CSP features must be distinct")

    def csp_for_band(self, band_index: int) -> CSPModel:
        return self.csp_models[self.band_indices.index(band_index)]


# ---------------------------------------------------------------------------
# CSP
# ---------------------------------------------------------------------------


def _normalized_covariances(trials: np.ndarray) -> np.ndarray:
    centered = trials - trials.mean(axis=2, keepdims=True)
    covs = np.einsum("nct,ndt->ncd", centered, centered)
    traces = np.trace(covs, axis1=1, axis2=2)
    if np.any(traces <= 0):
        raise ModelFitError(f"zero variance in trial {int(np.argmin(traces))}; cannot normalize covariance")
    return covs / traces[:, None, None]


def fit_csp_from_covariances(c1: np.ndarray, c2: np.ndarray, n_pairs: int) -> CSPModel:
    """Solve C1 w = lambda (C1 + C2) w; columns sorted by lambda descending.

    A singular composite gets a ridge of 1e-10 * trace / d before a second
    attempt.
    """
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    n_channels = c1.shape[0]
    if 2 * n_pairs > n_channels:
        raise ConfigurationError(f"{n_pairs} filter pairs need at least {2 * n_pairs} channels, got {n_channels}")

    composite = c1 + c2
    try:
        eigenvalues, filters = linalg.eigh(c1, composite)
    except linalg.LinAlgError:
        ridge = RIDGE_FACTOR * np.trace(composite) / n_channels
        logger.warning(f"[CSP] Composite covariance singular; adding ridge {ridge:.3g}")
        try:
            eigenvalues, filters = linalg.eigh(c1, composite + ridge * np.eye(n_channels))
        except linalg.LinAlgError as exc:
            raise ModelFitError("singular composite covariance after ridge regularization") from exc

    order = np.argsort(eigenvalues)[::-1]
    return CSPModel(filters=filters[:, order], eigenvalues=np.clip(eigenvalues[order], 0.0, 1.0), n_pairs=n_pairs)


def fit_csp(ts: TrialSet, n_pairs: int = 2) -> CSPModel:
    """CSP from trace-normalized trial covariances averaged per class."""
    ts.require_both_classes("CSP")
    covs = _normalized_covariances(np.asarray(ts.trials, dtype=np.float64))
    labels = ts.labels
    return fit_csp_from_covariances(covs[labels == 1].mean(axis=0), covs[labels == 0].mean(axis=0), n_pairs)


def csp_log_variance(model: CSPModel, trials: np.ndarray) -> np.ndarray:
    """log(var_j / sum_j var_j) over the 2m selected filters, per trial."""
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3 or trials.shape[1] != model.n_channels:
        raise SignalShapeError(f"trials of shape {trials.shape} do not match a {model.n_channels}-channel CSP")
    projected = np.einsum("cf,nct->nft", model.selected_filters, trials)
    variances = projected.var(axis=2)
    if np.any(variances <= 0):
        bad = int(np.flatnonzero(np.any(variances <= 0, axis=1))[0])
        raise ModelFitError(f"zero variance in projected trial {bad}")
    return np.log(variances / variances.sum(axis=1, keepdims=True))


def csp_features(model: CSPModel, ts: TrialSet) -> np.ndarray:
    return csp_log_variance(model, ts.trials)


# ---------------------------------------------------------------------------
# MIBIF
# ---------------------------------------------------------------------------


def mutual_information_scores(features: np.ndarray, labels: np.ndarray, n_bins: int = MI_BINS) -> np.ndarray:
    """Histogram estimate of I(feature; label), equal-width bins per feature.

    Constant features score 0.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    scores = np.zeros(features.shape[1])
    for j in range(features.shape[1]):
        column = features[:, j]
        if np.ptp(column) == 0:
            continue
        edges = np.histogram_bin_edges(column, bins=n_bins)
        binned = np.digitize(column, edges[1:-1])
        scores[j] = mutual_info_score(labels, binned)
    return scores


def mibif_select(features: np.ndarray, labels: np.ndarray, k: int, n_bins: int = MI_BINS) -> np.ndarray:
    """Indices of the ``k`` most informative features (ties: lower index first)."""
    features = np.asarray(features)
    if not 1 <= k <= features.shape[1]:
        raise ConfigurationError(f"cannot select {k} of {features.shape[1]} features")
    scores = mutual_information_scores(features, labels, n_bins)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k].astype(np.int64)


# ---------------------------------------------------------------------------
# Ledoit-Wolf + rLDA
# ---------------------------------------------------------------------------


def ledoit_wolf(samples: np.ndarray, assume_centered: bool = False) -> Tuple[np.ndarray, float]:
    """Shrink the sample covariance toward (trace(S)/d) I.

    Returns ``(covariance, gamma)`` with gamma the data-driven intensity.

    ``assume_centered=True`` skips mean removal; rLDA passes class-centred
    features this way. Centring only two samples leaves each outer product
    equal to S, so gamma collapses to 0: such sets need ``assume_centered``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise SignalShapeError(f"samples must be [n x d], got shape {samples.shape}")
    if samples.shape[0] < 2:
        raise ModelFitError(f"Ledoit-Wolf needs at least 2 samples, got {samples.shape[0]}")
    if not np.all(np.isfinite(samples)):
        raise ModelFitError("non-finite values in covariance samples")

    covariance, gamma = sklearn_ledoit_wolf(samples, assume_centered=assume_centered)
    covariance = (covariance + covariance.T) / 2.0
    return covariance, float(np.clip(gamma, 0.0, 1.0))


def _shrunk_covariance(centered: np.ndarray, gamma: float) -> np.ndarray:
    sample_cov = centered.T @ centered / centered.shape[0]
    mu = np.trace(sample_cov) / sample_cov.shape[0]
    return (1.0 - gamma) * sample_cov + gamma * mu * np.eye(sample_cov.shape[0])


def fit_rlda(features: np.ndarray, labels: np.ndarray, shrinkage: Optional[float] = None) -> RLDAModel:
    """Fit rLDA; ``shrinkage`` forces gamma instead of the Ledoit-Wolf estimate.

    The covariance is pooled over class-centred features and the weights
    come from a linear solve of Sigma w = mu1 - mu0.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise SignalShapeError(f"features {features.shape} do not match {labels.shape[0]} labels")
    if not np.all(np.isfinite(features)):
        raise ModelFitError("non-finite features")

    n1 = int(np.sum(labels == 1))
    n0 = int(np.sum(labels == 0))
    if n0 == 0 or n1 == 0:
        raise SingleClassError(f"rLDA requires both classes, got counts {n0}/{n1} (single class)")
    if n0 < 2 or n1 < 2:
        raise SingleClassError(f"rLDA requires at least 2 trials per class, got {n0}/{n1}")

    mu0 = features[labels == 0].mean(axis=0)
    mu1 = features[labels == 1].mean(axis=0)
    centered = features - np.where((labels == 1)[:, None], mu1, mu0)

    if shrinkage is None:
        covariance, gamma = ledoit_wolf(centered, assume_centered=True)
    else:
        gamma = float(shrinkage)
        covariance = _shrunk_covariance(centered, gamma)

    try:
        weights = linalg.solve(covariance, mu1 - mu0, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise ModelFitError(f"singular covariance in rLDA (gamma={gamma:.3g})") from exc

    bias = -float(weights @ (mu1 + mu0)) / 2.0
    logger.debug(f"[RLDA] d={features.shape[1]} n={features.shape[0]} gamma={gamma:.4f}")
    return RLDAModel(weights=weights, bias=bias, shrinkage_gamma=gamma)


def rlda_scores(model: RLDAModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.weights.shape[0]:
        raise SignalShapeError(f"features {features.shape} do not match {model.weights.shape[0]} weights")
    return features @ model.weights + model.bias


def predict_rlda(model: RLDAModel, features: np.ndarray) -> np.ndarray:
    return (rlda_scores(model, features) > 0).astype(np.int64)


# ---------------------------------------------------------------------------
# Time-domain features
# ---------------------------------------------------------------------------


def time_domain_layout(ts: TrialSet, window_s: float) -> Tuple[int, int]:
    """``(n_windows, window_samples)`` for :func:`time_domain_features`."""
    if not window_s > 0:
        raise ConfigurationError(f"window_s must be positive, got {window_s}")
    window_samples = max(int(round(window_s * ts.sample_rate_hz)), 1)
    if window_samples > ts.n_timepoints:
        raise SignalShapeError(
            f"window of {window_samples} samples longer than trial ({ts.n_timepoints} samples)"
        )
    return ts.n_timepoints // window_samples, window_samples


def time_domain_features(ts: TrialSet, window_s: float = 0.1) -> np.ndarray:
    """Per-channel means of consecutive windows, channel-major.

    Samples after the last full window are ignored.
    """
    n_windows, window_samples = time_domain_layout(ts, window_s)
    trials = np.asarray(ts.trials, dtype=np.float64)[:, :, :n_windows * window_samples]
    means = trials.reshape(ts.n_trials, ts.n_channels, n_windows, window_samples).mean(axis=3)
    return means.reshape(ts.n_trials, ts.n_channels * n_windows)


# ---------------------------------------------------------------------------
# FB-CSP
# ---------------------------------------------------------------------------


def filter_bank_epochs(rec: Recording, bank: FilterBankSpec, interval: Tuple[float, float],
                       order: int = 8, rejection_mask: Optional[np.ndarray] = None,
                       zero_phase: bool = False, band_indices: Optional[Sequence[int]] = None,
                       max_workers: int = 1) -> List[Tuple[int, TrialSet]]:
    """Band-pass the recording per band and epoch it.

    Bands reaching the Nyquist frequency are skipped. The same rejection
    mask is applied in every band, so all trial sets hold the same trials.
    """
    nyquist = rec.sample_rate_hz / 2.0
    wanted = range(len(bank)) if band_indices is None else band_indices
    usable = []
    for b in wanted:
        lo, hi = bank.bands[b]
        if hi >= nyquist:
            logger.warning(f"[FBCSP] Skipping band {b} ({lo}-{hi} Hz): not below Nyquist ({nyquist} Hz)")
            continue
        usable.append(b)
    if not usable:
        raise SignalShapeError(f"no filter-bank band lies below Nyquist ({nyquist} Hz)")

    def run_band(b: int) -> Tuple[int, TrialSet]:
        cascade = design_butterworth(FilterKind.BANDPASS, order, bank.bands[b], rec.sample_rate_hz)
        filtered = apply_iir(cascade, rec, zero_phase=zero_phase)
        return b, epoch_trials(filtered, interval, rejection_mask=rejection_mask)

    if max_workers <= 1:
        return [run_band(b) for b in usable]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(run_band, usable))


def _band_features(csp_models: Sequence[CSPModel], band_sets: Sequence[Tuple[int, TrialSet]]) -> np.ndarray:
    return np.hstack([csp_log_variance(model, ts.trials) for model, (_, ts) in zip(csp_models, band_sets)])


def fit_fbcsp_bands(band_sets: Sequence[Tuple[int, TrialSet]], bank: FilterBankSpec,
                    config: Optional[FBCSPConfig] = None) -> FBCSPModel:
    """CSP per band, MIBIF selection over all band features, rLDA on the selection."""
    config = config or FBCSPConfig()
    if not band_sets:
        raise SignalShapeError("no band trial sets to fit")
    first = band_sets[0][1]
    first.require_both_classes("FB-CSP")
    labels = first.labels

    def fit_band(item: Tuple[int, TrialSet]) -> CSPModel:
        return fit_csp(item[1], config.n_pairs)

    if config.max_workers <= 1:
        csp_models = [fit_band(item) for item in band_sets]
    else:
        with ThreadPoolExecutor(max_workers=config.max_workers) as executor:
            csp_models = list(executor.map(fit_band, band_sets))

    features = _band_features(csp_models, band_sets)
    per_band = 2 * config.n_pairs
    feature_ids = [(b, j) for b, _ in band_sets for j in range(per_band)]
    if config.n_selected > len(feature_ids):
        raise ConfigurationError(
            f"cannot select {config.n_selected} features from {len(feature_ids)} extracted"
        )

    chosen = mibif_select(features, labels, config.n_selected, config.mi_bins)
    classifier = fit_rlda(features[:, chosen], labels, shrinkage=config.shrinkage)
    selected = [feature_ids[i] for i in chosen]
    logger.info(f"[FBCSP] {len(band_sets)} bands, {features.shape[1]} features, selected {selected}")

    return FBCSPModel(
        bank=bank,
        band_indices=tuple(b for b, _ in band_sets),
        csp_models=csp_models,
        selected_features=selected,
        classifier=classifier,
        interval=first.interval,
        sample_rate_hz=first.sample_rate_hz,
        config=config,
    )


def fbcsp_features(model: FBCSPModel, band_sets: Sequence[Tuple[int, TrialSet]]) -> np.ndarray:
    """Selected FB-CSP features, in selection order."""
    by_band = {b: ts for b, ts in band_sets}
    cache: Dict[int, np.ndarray] = {}
    columns = []
    for band, filter_index in model.selected_features:
        if band not in by_band:
            raise SignalShapeError(f"band {band} missing from the supplied trial sets")
        if band not in cache:
            cache[band] = csp_log_variance(model.csp_for_band(band), by_band[band].trials)
        columns.append(cache[band][:, filter_index])
    return np.column_stack(columns)


def predict_fbcsp(model: FBCSPModel, band_sets: Sequence[Tuple[int, TrialSet]]) -> np.ndarray:
    return predict_rlda(model.classifier, fbcsp_features(model, band_sets))


def fbcsp_band_sets(model: FBCSPModel, rec: Recording,
                    rejection_mask: Optional[np.ndarray] = None) -> List[Tuple[int, TrialSet]]:
    """Epoch an unseen recording in the bands the model selected from."""
    if not np.isclose(rec.sample_rate_hz, model.sample_rate_hz):
        raise SignalShapeError(
            f"sample-rate mismatch: model {model.sample_rate_hz} Hz, recording {rec.sample_rate_hz} Hz"
        )
    bands = sorted({b for b, _ in model.selected_features})
    return filter_bank_epochs(rec, model.bank, model.interval, order=model.config.filter_order,
                              rejection_mask=rejection_mask, zero_phase=model.config.zero_phase,
                              band_indices=bands, max_workers=model.config.max_workers)


def fit_fbcsp(rec: Recording, bank: FilterBankSpec, interval: Tuple[float, float],
              config: Optional[FBCSPConfig] = None,
              rejection_mask: Optional[np.ndarray] = None) -> FBCSPModel:
    """Band-pass, epoch, CSP, MIBIF and rLDA on a cleaned, high-passed recording."""
    config = config or FBCSPConfig()
    band_sets = filter_bank_epochs(rec, bank, interval, order=config.filter_order,
                                   rejection_mask=rejection_mask, zero_phase=config.zero_phase,
                                   max_workers=config.max_workers)
    return fit_fbcsp_bands(band_sets, bank, config)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def features_to_csv(features: np.ndarray, path: PathLike, labels: Optional[np.ndarray] = None,
                    names: Optional[Sequence[str]] = None):
    features = np.asarray(features)
    names = list(names) if names is not None else [f"f{j}" for j in range(features.shape[1])]
    frame = pd.DataFrame(features, columns=names)
    if labels is not None:
        frame.insert(0, "label", np.asarray(labels, dtype=np.int64))
    return write_csv(frame, path)


def save_rlda(model: RLDAModel, path: PathLike, metadata: Optional[Dict[str, Any]] = None):
    meta = {"shrinkage_gamma": model.shrinkage_gamma, "bias": model.bias, **(metadata or {})}
    return save_model_container(path, "rlda", meta, {"weights": np.asarray(model.weights, dtype=np.float64)})


def load_rlda(path: PathLike) -> Tuple[RLDAModel, Dict[str, Any]]:
    kind, meta, arrays = load_model_container(path)
    if kind != "rlda":
        raise ConfigurationError(f"expected an rlda model, found {kind!r}")
    model = RLDAModel(weights=arrays["weights"], bias=float(meta["bias"]),
                      shrinkage_gamma=float(meta["shrinkage_gamma"]))
    return model, meta


def save_fbcsp(model: FBCSPModel, path: PathLike, metadata: Optional[Dict[str, Any]] = None):
    cfg = model.config
    meta = {
        "interval": list(model.interval),
        "sample_rate_hz": model.sample_rate_hz,
        "band_indices": list(model.band_indices),
        "n_pairs": cfg.n_pairs,
        "n_selected": cfg.n_selected,
        "filter_order": cfg.filter_order,
        "mi_bins": cfg.mi_bins,
        "zero_phase": cfg.zero_phase,
        "shrinkage": cfg.shrinkage,
        "shrinkage_gamma": model.classifier.shrinkage_gamma,
        "bias": model.classifier.bias,
        "bank_min_hz": model.bank.min_hz,
        "bank_max_hz": model.bank.max_hz,
        **(metadata or {}),
    }
    arrays = {
        "bank": np.asarray(model.bank.bands, dtype=np.float64),
        "selected_features": np.asarray(model.selected_features, dtype=np.int64),
        "weights": np.asarray(model.classifier.weights, dtype=np.float64),
    }
    for band, csp in zip(model.band_indices, model.csp_models):
        arrays[f"csp_filters_{band}"] = np.asarray(csp.filters, dtype=np.float64)
        arrays[f"csp_eigenvalues_{band}"] = np.asarray(csp.eigenvalues, dtype=np.float64)
    return save_model_container(path, "fbcsp", meta, arrays)


def load_fbcsp(path: PathLike) -> Tuple[FBCSPModel, Dict[str, Any]]:
    kind, meta, arrays = load_model_container(path)
    if kind != "fbcsp":
        raise ConfigurationError(f"expected an fbcsp model, found {kind!r}")
    config = FBCSPConfig(n_pairs=int(meta["n_pairs"]), n_selected=int(meta["n_selected"]),
                         filter_order=int(meta["filter_order"]), mi_bins=int(meta["mi_bins"]),
                         zero_phase=bool(meta["zero_phase"]), shrinkage=meta.get("shrinkage"))
    band_indices = tuple(int(b) for b in meta["band_indices"])
    csp_models = [
        CSPModel(filters=arrays[f"csp_filters_{b}"], eigenvalues=arrays[f"csp_eigenvalues_{b}"],
                 n_pairs=config.n_pairs)
        for b in band_indices
    ]
    bank = FilterBankSpec(bands=tuple(map(tuple, arrays["bank"])), min_hz=float(meta["bank_min_hz"]),
                          max_hz=float(meta["bank_max_hz"]))
    model = FBCSPModel(
        bank=bank,
        band_indices=band_indices,
        csp_models=csp_models,
        selected_features=[(int(b), int(j)) for b, j in arrays["selected_features"]],
        classifier=RLDAModel(weights=arrays["weights"], bias=float(meta["bias"]),
                             shrinkage_gamma=float(meta["shrinkage_gamma"])),
        interval=tuple(meta["interval"]),
        sample_rate_hz=float(meta["sample_rate_hz"]),
        config=config,
    )
    return model, meta
