"""Continuous-signal conditioning and epoching.

Common average reference, rational resampling, exponential moving
standardization and cutting trials around stimulus onsets. Every function
takes a :class:`Recording` and returns a new one; inputs are never mutated.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np
from scipy import signal

from eeg_structures import (
    ConfigurationError,
    DecodingTask,
    EventMarker,
    Recording,
    SignalShapeError,
    TrialSet,
)

logger = logging.getLogger(__name__)

LONG_INTERVAL_S: Tuple[float, float] = (0.0, 7.0)
LATE_INTERVAL_S: Tuple[float, float] = (4.0, 7.0)


@dataclass
class StandardizationConfig:
    """Electrode-wise exponential moving standardization parameters."""
    decay: float = 0.001
    eps: float = 1e-4
    init_block_s: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ConfigurationError(f"decay must lie in (0, 1), got {self.decay}")
        if not self.eps > 0.0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if self.init_block_s < 0.0:
            raise ConfigurationError(f"init_block_s must be >= 0, got {self.init_block_s}")


@dataclass
class ResampleConfig:
    """Windowed-sinc anti-alias filter used by :func:`resample`."""
    cutoff_fraction: float = 0.45  # of the lower Nyquist frequency
    kaiser_beta: float = 8.0
    half_width: int = 20  # taps per side, in units of max(up, down)
    max_denominator: int = 1000

    def __post_init__(self):
        if not 0.0 < self.cutoff_fraction <= 1.0:
            raise ConfigurationError(f"cutoff_fraction must lie in (0, 1], got {self.cutoff_fraction}")
        if self.half_width < 1:
            raise ConfigurationError(f"half_width must be >= 1, got {self.half_width}")


def common_average_reference(rec: Recording) -> Recording:
    """Subtract the instantaneous mean over channels from every channel."""
    if rec.n_channels < 2:
        raise SignalShapeError("common average reference needs at least 2 channels (single-channel recording)")
    data = np.asarray(rec.data, dtype=np.float64)
    return rec.with_data(data - data.mean(axis=0, keepdims=True))


def _rational_factors(source_hz: float, target_hz: float, max_denominator: int) -> Tuple[int, int]:
    ratio = Fraction(target_hz / source_hz).limit_denominator(max_denominator)
    return ratio.numerator, ratio.denominator


def resample(rec: Recording, target_hz: float, config: Optional[ResampleConfig] = None) -> Recording:
    """Resample to ``target_hz`` with a Kaiser-windowed sinc anti-alias filter.

    Output length is ``round(n_samples * target / source)``; event indices
    are rescaled by the same ratio with round-half-to-even.
    """
    if not target_hz > 0:
        raise ConfigurationError(f"target rate must be positive, got {target_hz}")
    if target_hz == rec.sample_rate_hz:
        return rec

    config = config or ResampleConfig()
    up, down = _rational_factors(rec.sample_rate_hz, target_hz, config.max_denominator)
    max_rate = max(up, down)
    numtaps = 2 * config.half_width * max_rate + 1

    cutoff_hz = config.cutoff_fraction * min(rec.sample_rate_hz, target_hz) / 2.0
    nyquist_up = rec.sample_rate_hz * up / 2.0
    taps = signal.firwin(numtaps, cutoff_hz / nyquist_up, window=("kaiser", config.kaiser_beta))

    n_out = int(round(rec.n_samples * target_hz / rec.sample_rate_hz))
    data = signal.resample_poly(np.asarray(rec.data, dtype=np.float64), up, down, axis=1, window=taps)
    data = data[:, :n_out]

    scale = target_hz / rec.sample_rate_hz
    events = [
        EventMarker(min(int(np.rint(ev.sample_index * scale)), n_out - 1), ev.condition)
        for ev in rec.events
    ]
    logger.debug(f"[RESAMPLE] {rec.sample_rate_hz} Hz -> {target_hz} Hz (up={up}, down={down}, taps={numtaps})")
    return rec.with_data(data, sample_rate_hz=float(target_hz), events=events)


def ewm_standardize(rec: Recording, cfg: Optional[StandardizationConfig] = None) -> Recording:
    """Exponential moving standardization, per channel.

    m_t = (1-a) m_{t-1} + a x_t ; v_t = (1-a) v_{t-1} + a (x_t - m_t)^2 ;
    out_t = (x_t - m_t) / max(sqrt(v_t), eps). m and v are seeded with the
    plain mean/variance of the first ``init_block_s`` seconds, or with the
    first sample and zero variance when the block is empty.
    """
    cfg = cfg or StandardizationConfig()
    x = np.asarray(rec.data, dtype=np.float64)
    decay = cfg.decay

    n_init = min(int(round(cfg.init_block_s * rec.sample_rate_hz)), rec.n_samples)
    if n_init >= 1:
        mean0 = x[:, :n_init].mean(axis=1)
        var0 = x[:, :n_init].var(axis=1)
    else:
        mean0 = x[:, 0].copy()
        var0 = np.zeros(rec.n_channels)

    b, a = [decay], [1.0, -(1.0 - decay)]
    mean, _ = signal.lfilter(b, a, x, axis=1, zi=((1.0 - decay) * mean0)[:, None])
    centered = x - mean
    var, _ = signal.lfilter(b, a, centered ** 2, axis=1, zi=((1.0 - decay) * var0)[:, None])

    return rec.with_data(centered / np.maximum(np.sqrt(var), cfg.eps))


def epoch_trials(rec: Recording, interval: Tuple[float, float],
                 rejection_mask: Optional[np.ndarray] = None) -> TrialSet:
    """Cut one trial per event over ``interval`` seconds relative to onset.

    Trials overlapping samples flagged in ``rejection_mask`` are dropped.
    Labels default to the outcome attribute (ERROR=1); use
    ``project_labels`` to switch tasks.
    """
    t_start, t_end = float(interval[0]), float(interval[1])
    if not t_start < t_end:
        raise SignalShapeError(f"interval start must precede end: {interval}")
    if not rec.events:
        raise SignalShapeError("recording has no events to epoch")

    fs = rec.sample_rate_hz
    offset = int(round(t_start * fs))
    n_timepoints = int(round((t_end - t_start) * fs))
    if rejection_mask is not None and rejection_mask.shape != (rec.n_samples,):
        raise SignalShapeError(f"rejection mask shape {rejection_mask.shape} != ({rec.n_samples},)")

    starts = []
    kept = []
    for k, event in enumerate(rec.events):
        lo = event.sample_index + offset
        hi = lo + n_timepoints
        if lo < 0 or hi > rec.n_samples:
            raise SignalShapeError(
                f"epoch window [{lo}, {hi}) of event {k} out of bounds for {rec.n_samples} samples"
            )
        if rejection_mask is not None and rejection_mask[lo:hi].any():
            continue
        starts.append(lo)
        kept.append(k)

    n_dropped = len(rec.events) - len(kept)
    if n_dropped:
        logger.info(f"[EPOCH] Dropped {n_dropped} of {len(rec.events)} trials overlapping rejected samples")
    if not kept:
        raise SignalShapeError("all trials rejected by the cleaning mask")

    index = np.asarray(starts)[:, None] + np.arange(n_timepoints)[None, :]
    trials = np.transpose(rec.data[:, index], (1, 0, 2))
    conditions = tuple(rec.events[k].condition for k in kept)
    labels = np.array([cond.class_index(DecodingTask.ERROR_VS_CORRECT) for cond in conditions], dtype=np.int64)

    return TrialSet(
        trials=trials,
        labels=labels,
        sample_rate_hz=fs,
        interval=(t_start, t_end),
        conditions=conditions,
        channel_names=rec.channel_names,
        event_indices=tuple(kept),
    )
