"""
Decoding Pipeline - cadeia completa de decodificação por método

Carrega os containers, aplica a cadeia de pré-processamento específica
de cada método, separa treino/teste (80/20 estratificado), ajusta o
decodificador, avalia no conjunto de teste e grava modelo e tabelas.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from sklearn.model_selection import train_test_split

from classical_decoders import (
    FBCSPConfig,
    fbcsp_features,
    filter_bank_epochs,
    fit_fbcsp_bands,
    fit_rlda,
    load_fbcsp,
    load_rlda,
    predict_rlda,
    rlda_scores,
    save_fbcsp,
    save_rlda,
    time_domain_features,
)
from container_io import PathLike, load_recording, read_model_kind, write_csv
from deep_convnet import (
    Deep4Config,
    DESK_FILTERS,
    TrainConfig,
    build,
    evaluate,
    history_to_csv,
    holdout_split,
    load_convnet,
    save_convnet,
    train,
)
from eeg_structures import (
    ConfigurationError,
    DecodingTask,
    EventMarker,
    Recording,
    Robot,
    SignalShapeError,
    TrialSet,
    project_labels,
)
from preprocessing import (
    LONG_INTERVAL_S,
    StandardizationConfig,
    common_average_reference,
    epoch_trials,
    ewm_standardize,
    resample,
)
from signal_filters import (
    FilterKind,
    apply_iir,
    auto_clean,
    design_butterworth,
    make_filter_bank,
)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["run_id", "method", "interval", "accuracy", "n_train", "n_test", "n_class0", "n_class1"]


class DecodingMethod(str, Enum):
    CONVNET = "convnet"
    RLDA = "rlda"
    FBCSP = "fbcsp"


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


class ConvNetParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resample_hz: float = Field(250.0, gt=0)
    standardize_decay: float = Field(0.001, gt=0, lt=1)
    standardize_eps: float = Field(1e-4, gt=0)
    standardize_init_s: float = Field(4.0, ge=0)
    block_filters: Tuple[int, int, int, int] = DESK_FILTERS
    temporal_kernel: int = Field(10, ge=1)
    pool_size: int = Field(3, ge=1)
    pool_stride: int = Field(3, ge=1)
    dropout_p: float = Field(0.5, ge=0, lt=1)
    batch_norm: bool = True
    max_epochs: int = Field(60, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    patience: Optional[int] = Field(None, ge=0)


class RLDAParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resample_hz: float = Field(250.0, gt=0)
    window_s: float = Field(0.1, gt=0)
    shrinkage: Optional[float] = Field(None, ge=0, le=1)


class FBCSPParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    resample_hz: float = Field(250.0, gt=0)
    highpass_hz: float = Field(0.5, gt=0)
    highpass_order: int = 4
    clean_threshold_uv: float = Field(800.0, gt=0)
    n_pairs: int = Field(2, ge=1)
    n_selected: int = Field(8, ge=1)
    filter_order: int = 8
    zero_phase: bool = False
    shrinkage: Optional[float] = Field(None, ge=0, le=1)
    bank_start_hz: float = 0.5
    bank_stop_hz: float = 144.0
    bank_split_hz: float = 30.5
    bank_narrow_hz: float = 2.0
    bank_wide_hz: float = 6.0
    bank_n_bands: int = 35


MethodParams = Union[ConvNetParams, RLDAParams, FBCSPParams]


class RunConfig(BaseModel):
    """One participant-equivalent decoding run."""
    model_config = ConfigDict(extra="forbid")

    inputs: List[str] = Field(..., min_length=1)
    method: DecodingMethod
    task: DecodingTask = DecodingTask.ERROR_VS_CORRECT
    robot: Optional[Robot] = None
    interval: Tuple[float, float] = LONG_INTERVAL_S
    seed: int = 0
    split_fraction: float = Field(0.8, gt=0, lt=1)
    output_dir: str = "runs"
    run_id: Optional[str] = None
    threads: int = Field(1, ge=1)
    convnet: ConvNetParams = Field(default_factory=ConvNetParams)
    rlda: RLDAParams = Field(default_factory=RLDAParams)
    fbcsp: FBCSPParams = Field(default_factory=FBCSPParams)

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if not self.interval[0] < self.interval[1]:
            raise ValueError(f"interval start must precede end, got {self.interval}")
        missing = [path for path in self.inputs if not Path(path).exists()]
        if missing:
            raise ValueError(f"input containers not found: {missing}")
        if self.robot is not None and self.task != DecodingTask.ERROR_VS_CORRECT:
            raise ValueError("a robot filter only applies to the error_vs_correct task")
        return self

    @property
    def params(self) -> MethodParams:
        return getattr(self, self.method.value)

    @property
    def effective_run_id(self) -> str:
        return self.run_id or Path(self.inputs[0]).name

    @property
    def interval_label(self) -> str:
        return format_interval(self.interval)

    @classmethod
    def build(cls, values: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(values)
        except ValidationError as exc:
            problems = "; ".join(
                f"invalid field '{'.'.join(str(p) for p in err['loc']) or 'config'}': {err['msg']}"
                for err in exc.errors()
            )
            raise ConfigurationError(problems) from exc


def format_interval(interval: Tuple[float, float]) -> str:
    return f"{interval[0]:g}-{interval[1]:g}"


# ---------------------------------------------------------------------------
# Preprocessing chains
# ---------------------------------------------------------------------------


@dataclass
class PreparedRecording:
    recording: Recording
    rejection_mask: Optional[np.ndarray] = None


def concatenate_recordings(recordings: List[Recording]) -> Recording:
    """Join sessions of one participant end to end, shifting their events."""
    first = recordings[0]
    if len(recordings) == 1:
        return first
    events: List[EventMarker] = []
    offset = 0
    for rec in recordings:
        if rec.channel_names != first.channel_names or rec.sample_rate_hz != first.sample_rate_hz:
            raise SignalShapeError("recordings to concatenate must share channels and sample rate")
        events += [EventMarker(ev.sample_index + offset, ev.condition) for ev in rec.events]
        offset += rec.n_samples
    data = np.concatenate([np.asarray(rec.data) for rec in recordings], axis=1)
    return Recording(data=data, sample_rate_hz=first.sample_rate_hz, channel_names=first.channel_names,
                     events=tuple(events))


def preprocess_for_method(rec: Recording, method: DecodingMethod, params: MethodParams,
                          max_workers: int = 1) -> PreparedRecording:
    """Method-specific chain.

    ConvNet: CAR, resample, moving standardization. rLDA: CAR, resample.
    FB-CSP: CAR, resample, Butterworth high-pass, amplitude cleaning.
    """
    method = DecodingMethod(method)
    out = resample(common_average_reference(rec), params.resample_hz)

    if method == DecodingMethod.CONVNET:
        cfg = StandardizationConfig(decay=params.standardize_decay, eps=params.standardize_eps,
                                    init_block_s=params.standardize_init_s)
        return PreparedRecording(ewm_standardize(out, cfg))

    if method == DecodingMethod.FBCSP:
        highpass = design_butterworth(FilterKind.HIGHPASS, params.highpass_order, [params.highpass_hz],
                                      out.sample_rate_hz)
        cleaned = auto_clean(apply_iir(highpass, out, zero_phase=params.zero_phase, max_workers=max_workers),
                             params.clean_threshold_uv)
        return PreparedRecording(cleaned.recording, cleaned.mask)

    return PreparedRecording(out)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    method: DecodingMethod
    interval: Tuple[float, float]
    accuracy: float
    n_train: int
    n_test: int
    n_class0: int
    n_class1: int
    predictions: pd.DataFrame
    model: Any
    metadata: Dict[str, Any]
    history: Any = None
    timings: Dict[str, float] = field(default_factory=dict)

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "run_id": self.run_id,
            "method": self.method.value,
            "interval": format_interval(self.interval),
            "accuracy": self.accuracy,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_class0": self.n_class0,
            "n_class1": self.n_class1,
        }], columns=METRICS_COLUMNS)


def stratified_split(labels: np.ndarray, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    indices = np.arange(len(labels))
    try:
        train_idx, test_idx = train_test_split(indices, train_size=train_fraction, stratify=labels,
                                               random_state=seed)
    except ValueError as exc:
        raise ConfigurationError(f"cannot split {len(labels)} trials {train_fraction:.0%}/rest: {exc}") from exc
    return np.sort(train_idx), np.sort(test_idx)


class DecodingPipeline:
    """
    Executa uma decodificação completa para um RunConfig.

    Cada etapa registra seu tempo em ``self.timings`` (apenas para log).
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.timings: Dict[str, float] = {}

    def _timed(self, stage: str, start: float) -> None:
        self.timings[stage] = time.perf_counter() - start

    def load(self) -> Recording:
        recordings = [load_recording(path) for path in self.config.inputs]
        return concatenate_recordings(recordings)

    def _trial_set(self, prepared: PreparedRecording) -> TrialSet:
        ts = epoch_trials(prepared.recording, self.config.interval, rejection_mask=prepared.rejection_mask)
        return project_labels(ts, self.config.task, self.config.robot)

    def _metadata(self, prepared: PreparedRecording) -> Dict[str, Any]:
        cfg = self.config
        return {
            "method": cfg.method.value,
            "run_id": cfg.effective_run_id,
            "interval": list(cfg.interval),
            "task": cfg.task.value,
            "robot": cfg.robot.value if cfg.robot else None,
            "seed": cfg.seed,
            "params": cfg.params.model_dump(mode="json"),
            "channel_names": list(prepared.recording.channel_names),
            "processed_sample_rate_hz": prepared.recording.sample_rate_hz,
        }

    def run(self, rec: Optional[Recording] = None) -> RunResult:
        cfg = self.config
        start = time.perf_counter()
        logger.info(f"[PIPELINE] Run {cfg.effective_run_id}: {cfg.method.value} on {cfg.interval_label} s")

        # 1. Dados
        rec = rec if rec is not None else self.load()
        self._timed("load", start)

        # 2. Pré-processamento
        stage = time.perf_counter()
        prepared = preprocess_for_method(rec, cfg.method, cfg.params, max_workers=cfg.threads)
        self._timed("preprocess", stage)

        # 3. Ajuste e avaliação
        stage = time.perf_counter()
        if cfg.method == DecodingMethod.FBCSP:
            result = self._run_fbcsp(prepared)
        elif cfg.method == DecodingMethod.RLDA:
            result = self._run_rlda(prepared)
        else:
            result = self._run_convnet(prepared)
        self._timed("fit", stage)
        self._timed("total", start)
        result.timings = dict(self.timings)

        logger.info(
            f"[PIPELINE] {cfg.method.value} accuracy {result.accuracy:.4f} on {result.n_test} test trials "
            f"({self.timings['total']:.1f}s)"
        )
        return result

    def _result(self, prepared: PreparedRecording, test: TrialSet, n_train: int, predictions: np.ndarray,
                scores: np.ndarray, model: Any, history: Any = None) -> RunResult:
        accuracy = float(np.mean(predictions == test.labels))
        n_class0, n_class1 = test.class_counts()
        frame = pd.DataFrame({
            "trial": list(test.event_indices) if test.event_indices else np.arange(test.n_trials),
            "label": test.labels,
            "prediction": predictions,
            "score": scores,
        })
        return RunResult(
            run_id=self.config.effective_run_id,
            method=self.config.method,
            interval=self.config.interval,
            accuracy=accuracy,
            n_train=n_train,
            n_test=test.n_trials,
            n_class0=n_class0,
            n_class1=n_class1,
            predictions=frame,
            model=model,
            metadata=self._metadata(prepared),
            history=history,
        )

    def _run_rlda(self, prepared: PreparedRecording) -> RunResult:
        params: RLDAParams = self.config.rlda
        ts = self._trial_set(prepared)
        train_idx, test_idx = stratified_split(ts.labels, self.config.split_fraction, self.config.seed)
        features = time_domain_features(ts, params.window_s)
        model = fit_rlda(features[train_idx], ts.labels[train_idx], shrinkage=params.shrinkage)
        test = ts.subset(test_idx)
        return self._result(prepared, test, len(train_idx), predict_rlda(model, features[test_idx]),
                            rlda_scores(model, features[test_idx]), model)

    def _run_fbcsp(self, prepared: PreparedRecording) -> RunResult:
        params: FBCSPParams = self.config.fbcsp
        bank = make_filter_bank(params.bank_start_hz, params.bank_stop_hz, params.bank_split_hz,
                                params.bank_narrow_hz, params.bank_wide_hz, params.bank_n_bands)
        band_sets = filter_bank_epochs(prepared.recording, bank, self.config.interval, order=params.filter_order,
                                       rejection_mask=prepared.rejection_mask, zero_phase=params.zero_phase,
                                       max_workers=self.config.threads)
        band_sets = [(b, project_labels(ts, self.config.task, self.config.robot)) for b, ts in band_sets]
        labels = band_sets[0][1].labels
        train_idx, test_idx = stratified_split(labels, self.config.split_fraction, self.config.seed)

        fb_config = FBCSPConfig(n_pairs=params.n_pairs, n_selected=params.n_selected,
                                filter_order=params.filter_order, zero_phase=params.zero_phase,
                                shrinkage=params.shrinkage, max_workers=self.config.threads)
        model = fit_fbcsp_bands([(b, ts.subset(train_idx)) for b, ts in band_sets], bank, fb_config)
        test_sets = [(b, ts.subset(test_idx)) for b, ts in band_sets]
        features = fbcsp_features(model, test_sets)
        return self._result(prepared, test_sets[0][1], len(train_idx), predict_rlda(model.classifier, features),
                            rlda_scores(model.classifier, features), model)

    def _run_convnet(self, prepared: PreparedRecording) -> RunResult:
        params: ConvNetParams = self.config.convnet
        ts = self._trial_set(prepared)
        net_config = Deep4Config(
            n_channels=ts.n_channels,
            n_timepoints=ts.n_timepoints,
            block_filters=params.block_filters,
            temporal_kernel=params.temporal_kernel,
            pool_size=params.pool_size,
            pool_stride=params.pool_stride,
            dropout_p=params.dropout_p,
            batch_norm=params.batch_norm,
        )
        train_config = TrainConfig(
            max_epochs=params.max_epochs,
            batch_size=params.batch_size,
            learning_rate=params.learning_rate,
            seed=self.config.seed,
            split_fraction=self.config.split_fraction,
            validation_fraction=params.validation_fraction,
            patience=params.patience,
        )
        train_idx, test_idx = holdout_split(ts, train_config)
        model, history = train(build(net_config, seed=self.config.seed), ts.subset(train_idx), train_config)
        test = ts.subset(test_idx)
        evaluation = evaluate(model, test)
        return self._result(prepared, test, len(train_idx), evaluation.predictions,
                            evaluation.probabilities[:, 1], model, history)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def save_model(result: RunResult, path: PathLike) -> Path:
    if result.method == DecodingMethod.CONVNET:
        return save_convnet(result.model, path, result.metadata)
    if result.method == DecodingMethod.FBCSP:
        return save_fbcsp(result.model, path, result.metadata)
    return save_rlda(result.model, path, result.metadata)


def load_model(path: PathLike) -> Tuple[DecodingMethod, Any, Dict[str, Any]]:
    kind = read_model_kind(path)
    loaders = {"convnet": load_convnet, "fbcsp": load_fbcsp, "rlda": load_rlda}
    if kind not in loaders:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    model, metadata = loaders[kind](path)
    return DecodingMethod(kind), model, metadata


def write_run_outputs(result: RunResult, output_dir: PathLike) -> List[Path]:
    """model/, metrics.csv, predictions.csv and, for the ConvNet, history.csv."""
    output_dir = Path(output_dir)
    written = [
        save_model(result, output_dir / "model"),
        write_csv(result.metrics_frame(), output_dir / "metrics.csv"),
        write_csv(result.predictions, output_dir / "predictions.csv"),
    ]
    if result.history is not None:
        written.append(history_to_csv(result.history, output_dir / "history.csv"))
    return written


def params_from_metadata(metadata: Dict[str, Any]) -> MethodParams:
    method = DecodingMethod(metadata["method"])
    model_cls = {DecodingMethod.CONVNET: ConvNetParams, DecodingMethod.RLDA: RLDAParams,
                 DecodingMethod.FBCSP: FBCSPParams}[method]
    return model_cls.model_validate(metadata["params"])
