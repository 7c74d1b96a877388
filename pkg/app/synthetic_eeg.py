"""
Synthetic EEG - gerador de dados sintéticos com verdade conhecida

Ruído 1/f (moldagem espectral de ruído branco com fases aleatórias) mais
ruído branco, com um efeito de classe controlado:
  * ERP: deflexão gaussiana nos trials da classe 1;
  * BANDPOWER: oscilação de banda limitada cuja potência é multiplicada
    por ``ratio`` nos trials da classe 1.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from container_io import PathLike
from eeg_structures import (
    ConditionLabel,
    ConfigurationError,
    DecodingTask,
    EventMarker,
    Outcome,
    Recording,
    Robot,
)

logger = logging.getLogger(__name__)

LEAD_IN_S = 2.0
TAIL_S = 2.0


class EffectKind(str, Enum):
    ERP = "erp"
    BANDPOWER = "bandpower"


class NoiseSpec(BaseModel):
    """1/f^exponent power spectrum (flat below ``knee_hz``) plus a white floor."""
    model_config = ConfigDict(extra="forbid")

    exponent: float = Field(1.0, ge=0.0, le=3.0)
    pink_std_uv: float = Field(5.0, ge=0.0)
    white_std_uv: float = Field(2.0, ge=0.0)
    knee_hz: float = Field(1.0, ge=0.0)


class EffectSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: EffectKind = EffectKind.ERP
    channels: List[int] = Field(default_factory=lambda: [0, 1, 2, 3], min_length=1)
    # ERP
    amplitude_uv: float = Field(8.0, ge=0.0)
    latency_s: float = Field(4.5, ge=0.0)
    width_s: float = Field(1.0, gt=0.0)
    # BANDPOWER
    band_hz: Tuple[float, float] = (8.0, 12.0)
    ratio: float = Field(4.0, gt=0.0)
    base_amplitude_uv: float = Field(3.0, ge=0.0)

    @model_validator(mode="after")
    def _check(self) -> "EffectSpec":
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("effect channels must be unique")
        if not 0.0 < self.band_hz[0] < self.band_hz[1]:
            raise ValueError(f"band_hz must be increasing positive edges, got {self.band_hz}")
        return self


class SynthSpec(BaseModel):
    """Recording layout, noise and class effect of a synthetic dataset."""
    model_config = ConfigDict(extra="forbid")

    n_channels: int = Field(16, ge=2)
    n_trials: int = Field(200, ge=2)
    sample_rate_hz: float = Field(250.0, gt=0.0)
    trial_length_s: float = Field(7.0, gt=0.0)
    iti_s: float = Field(1.0, ge=0.0)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    effect: EffectSpec = Field(default_factory=EffectSpec)
    effect_task: DecodingTask = DecodingTask.ERROR_VS_CORRECT
    class_balance: float = Field(0.5, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SynthSpec":
        bad = [c for c in self.effect.channels if not 0 <= c < self.n_channels]
        if bad:
            raise ValueError(f"effect channels {bad} outside the {self.n_channels}-channel montage")
        if self.effect.kind == EffectKind.ERP and self.effect.latency_s > self.trial_length_s:
            raise ValueError(f"ERP latency {self.effect.latency_s} s beyond trial length {self.trial_length_s} s")
        if self.effect.kind == EffectKind.BANDPOWER and self.effect.band_hz[1] >= self.sample_rate_hz / 2:
            raise ValueError(f"band {self.effect.band_hz} not below Nyquist ({self.sample_rate_hz / 2} Hz)")
        return self

    @classmethod
    def from_file(cls, path: PathLike) -> "SynthSpec":
        """Parse a JSON spec; errors name the offending field."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read spec {path}: {exc}") from exc
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigurationError(_describe_validation_error(exc)) from exc


def _describe_validation_error(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(item) for item in error["loc"]) or "spec"
        parts.append(f"invalid field '{location}': {error['msg']}")
    return "; ".join(parts)


@dataclass
class SynthResult:
    recording: Recording
    ground_truth: Dict[str, Any]

    def write_manifest(self, path: PathLike) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.ground_truth, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def class_assignment(n_trials: int, balance: float) -> np.ndarray:
    """Class-1 flags spread evenly: trial i is class 1 iff floor((i+1)b) > floor(ib)."""
    i = np.arange(n_trials)
    return (np.floor((i + 1) * balance) > np.floor(i * balance)).astype(np.int64)


def condition_for(index: int, is_effect: bool, task: DecodingTask) -> ConditionLabel:
    """Effect attribute from the class, the other attribute cycling every two trials."""
    other = (index // 2) % 2 == 1
    if task == DecodingTask.ERROR_VS_CORRECT:
        return ConditionLabel(Outcome.ERROR if is_effect else Outcome.CORRECT, Robot.NOHU if other else Robot.NAO)
    return ConditionLabel(Outcome.ERROR if other else Outcome.CORRECT, Robot.NOHU if is_effect else Robot.NAO)


def colored_noise(n_channels: int, n_samples: int, fs: float, exponent: float, knee_hz: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise with power spectrum ~ 1 / max(f, knee)^exponent (zero mean)."""
    spectrum = np.fft.rfft(rng.standard_normal((n_channels, n_samples)), axis=1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    floor = knee_hz if knee_hz > 0 else freqs[1] if len(freqs) > 1 else 1.0
    scale = np.maximum(freqs, floor) ** (-exponent / 2.0)
    scale[0] = 0.0
    shaped = np.fft.irfft(spectrum * scale, n=n_samples, axis=1)
    std = shaped.std(axis=1, keepdims=True)
    return shaped / np.where(std > 0, std, 1.0)


def band_limited_noise(n_samples: int, fs: float, band_hz: Tuple[float, float],
                       rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise restricted to ``band_hz`` by FFT masking."""
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / fs)
    spectrum[(freqs < band_hz[0]) | (freqs > band_hz[1])] = 0.0
    signal = np.fft.irfft(spectrum, n=n_samples)
    std = signal.std()
    return signal / std if std > 0 else signal


def _layout(spec: SynthSpec) -> Tuple[int, np.ndarray, int]:
    fs = spec.sample_rate_hz
    slot = spec.trial_length_s + spec.iti_s
    onsets = np.rint((LEAD_IN_S + slot * np.arange(spec.n_trials)) * fs).astype(np.int64)
    n_samples = int(round((LEAD_IN_S + slot * spec.n_trials + TAIL_S) * fs))
    trial_samples = int(round(spec.trial_length_s * fs))
    return n_samples, onsets, trial_samples


def _background(spec: SynthSpec, n_samples: int, seeds: List[np.random.SeedSequence]) -> np.ndarray:
    noise = spec.noise
    pink = colored_noise(spec.n_channels, n_samples, spec.sample_rate_hz, noise.exponent, noise.knee_hz,
                         np.random.default_rng(seeds[0]))
    white = np.random.default_rng(seeds[1]).standard_normal((spec.n_channels, n_samples))
    return noise.pink_std_uv * pink + noise.white_std_uv * white


def _assemble(spec: SynthSpec, data: np.ndarray, onsets: np.ndarray, classes: np.ndarray) -> SynthResult:
    events = [
        EventMarker(int(onset), condition_for(i, bool(classes[i]), spec.effect_task))
        for i, onset in enumerate(onsets)
    ]
    rec = Recording(
        data=data.astype(np.float32),
        sample_rate_hz=spec.sample_rate_hz,
        channel_names=tuple(f"Ch{c + 1:02d}" for c in range(spec.n_channels)),
        events=tuple(events),
    )
    ground_truth = {
        "spec": spec.model_dump(mode="json"),
        "effect_task": spec.effect_task.value,
        "class_labels": classes.tolist(),
        "onsets": onsets.tolist(),
        "n_class1": int(classes.sum()),
        "effect_channels": [rec.channel_names[c] for c in spec.effect.channels],
    }
    logger.info(f"[SYNTH] {spec.effect.kind.value}: {rec.summary()} with {int(classes.sum())} class-1 trials")
    return SynthResult(recording=rec, ground_truth=ground_truth)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def generate_erp(spec: SynthSpec) -> SynthResult:
    """Background noise plus a Gaussian deflection on class-1 trials."""
    if spec.effect.kind != EffectKind.ERP:
        raise ConfigurationError(f"generate_erp needs an erp effect, got {spec.effect.kind.value}")
    n_samples, onsets, trial_samples = _layout(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    data = _background(spec, n_samples, seeds)
    classes = class_assignment(spec.n_trials, spec.class_balance)

    effect = spec.effect
    t = np.arange(trial_samples) / spec.sample_rate_hz
    waveform = effect.amplitude_uv * np.exp(-0.5 * ((t - effect.latency_s) / effect.width_s) ** 2)
    channels = np.asarray(effect.channels)
    for onset in onsets[classes == 1]:
        data[channels, onset:onset + trial_samples] += waveform[None, :]
    return _assemble(spec, data, onsets, classes)


def generate_bandpower(spec: SynthSpec) -> SynthResult:
    """Band-limited oscillation on the effect channels, power x ``ratio`` on class-1 trials."""
    if spec.effect.kind != EffectKind.BANDPOWER:
        raise ConfigurationError(f"generate_bandpower needs a bandpower effect, got {spec.effect.kind.value}")
    n_samples, onsets, trial_samples = _layout(spec)
    background_seed, white_seed, effect_seed = np.random.SeedSequence(spec.seed).spawn(3)
    data = _background(spec, n_samples, [background_seed, white_seed])
    classes = class_assignment(spec.n_trials, spec.class_balance)

    effect = spec.effect
    gain = np.where(classes == 1, np.sqrt(effect.ratio), 1.0) * effect.base_amplitude_uv
    for i, child in enumerate(effect_seed.spawn(spec.n_trials)):
        rng = np.random.default_rng(child)
        onset = onsets[i]
        for channel in effect.channels:
            burst = band_limited_noise(trial_samples, spec.sample_rate_hz, effect.band_hz, rng)
            data[channel, onset:onset + trial_samples] += gain[i] * burst
    return _assemble(spec, data, onsets, classes)


def generate(spec: SynthSpec) -> SynthResult:
    if spec.effect.kind == EffectKind.ERP:
        return generate_erp(spec)
    return generate_bandpower(spec)
