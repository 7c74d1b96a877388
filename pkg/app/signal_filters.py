"""Butterworth IIR design, filter bank generation and amplitude cleaning.

Filters are designed as cascades of second-order sections (biquads) with
``scipy.signal.butter`` (bilinear transform with pre-warping) and applied
causally with ``sosfilt`` unless zero-phase filtering is requested.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import signal

from container_io import PathLike, write_csv
from eeg_structures import FilterDesignError, Recording, SignalShapeError

logger = logging.getLogger(__name__)

SUPPORTED_ORDERS = (2, 4, 6, 8)
DEFAULT_CLEAN_THRESHOLD_UV = 800.0
STABILITY_MARGIN = 1e-9


class FilterKind(Enum):
    """Supported Butterworth responses."""
    HIGHPASS = "highpass"
    BANDPASS = "bandpass"


@dataclass(frozen=True)
class IIRCascade:
    """Designed biquad cascade; each section is (b0, b1, b2, a1, a2) with a0 = 1."""
    sections: Tuple[Tuple[float, float, float, float, float], ...]
    design: FilterKind
    edges_hz: Tuple[float, ...]
    order: int
    sample_rate_hz: float

    @property
    def sos(self) -> np.ndarray:
        """Sections in scipy's ``[b0, b1, b2, 1, a1, a2]`` layout."""
        rows = [[b0, b1, b2, 1.0, a1, a2] for b0, b1, b2, a1, a2 in self.sections]
        return np.asarray(rows, dtype=np.float64)

    def pole_magnitudes(self) -> np.ndarray:
        _, poles, _ = signal.sos2zpk(self.sos)
        return np.abs(poles)

    def is_stable(self) -> bool:
        return bool(np.all(self.pole_magnitudes() < 1.0 - STABILITY_MARGIN))

    def frequency_response(self, freqs_hz: Sequence[float]) -> np.ndarray:
        """Complex response evaluated at ``freqs_hz``."""
        _, response = signal.sosfreqz(self.sos, worN=np.asarray(freqs_hz, dtype=np.float64),
                                      fs=self.sample_rate_hz)
        return response


@dataclass(frozen=True)
class FilterBankSpec:
    """Ordered, contiguous, non-overlapping list of (lo_hz, hi_hz) bands."""
    bands: Tuple[Tuple[float, float], ...]
    min_hz: float = 0.5
    max_hz: float = 144.0

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        object.__setattr__(self, "bands", bands)
        if not bands:
            raise FilterDesignError("filter bank needs at least one band")
        for k, (lo, hi) in enumerate(bands):
            if not lo < hi:
                raise FilterDesignError(f"band {k} is empty: ({lo}, {hi})")
            if lo < self.min_hz or hi > self.max_hz:
                raise FilterDesignError(f"band {k} ({lo}, {hi}) outside [{self.min_hz}, {self.max_hz}]")
            if k and bands[k - 1][1] != lo:
                raise FilterDesignError(f"bands {k - 1} and {k} are not contiguous")

    def __len__(self) -> int:
        return len(self.bands)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "band_index": np.arange(len(self.bands)),
            "lo_hz": [lo for lo, _ in self.bands],
            "hi_hz": [hi for _, hi in self.bands],
        })


@dataclass
class CleaningResult:
    """Output of :func:`auto_clean`: the cleaned view plus the sample mask."""
    recording: Recording
    mask: np.ndarray
    threshold_uv: float
    segments: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def design_butterworth(kind: FilterKind, order: int, edges_hz: Sequence[float], fs: float) -> IIRCascade:
    """Digital Butterworth filter as a biquad cascade.

    ``order`` is the total filter order: a band-pass of order 4 uses a
    second-order prototype, so both kinds yield ``order / 2`` sections.
    """
    kind = FilterKind(kind)
    if order % 2:
        raise FilterDesignError(f"odd order {order} not supported")
    if order not in SUPPORTED_ORDERS:
        raise FilterDesignError(f"order must be one of {SUPPORTED_ORDERS}, got {order}")
    if not fs > 0:
        raise FilterDesignError(f"invalid sample rate: {fs}")

    edges = tuple(float(e) for e in np.atleast_1d(edges_hz))
    nyquist = fs / 2.0
    if kind == FilterKind.HIGHPASS and len(edges) != 1:
        raise FilterDesignError(f"high-pass needs one edge, got {edges}")
    if kind == FilterKind.BANDPASS and (len(edges) != 2 or not edges[0] < edges[1]):
        raise FilterDesignError(f"band-pass needs two increasing edges, got {edges}")
    if any(e <= 0 for e in edges):
        raise FilterDesignError(f"edges must be positive, got {edges}")
    if any(e >= nyquist for e in edges):
        raise FilterDesignError(f"edge at/above Nyquist ({nyquist} Hz): {edges}")

    prototype_order = order if kind == FilterKind.HIGHPASS else order // 2
    wn = edges[0] if kind == FilterKind.HIGHPASS else list(edges)
    sos = signal.butter(prototype_order, wn, btype=kind.value, output="sos", fs=fs)

    sections = tuple(
        (float(b0), float(b1), float(b2), float(a1 / a0), float(a2 / a0))
        for b0, b1, b2, a0, a1, a2 in sos
    )
    cascade = IIRCascade(sections=sections, design=kind, edges_hz=edges, order=order,
                         sample_rate_hz=float(fs))
    if not cascade.is_stable():
        raise FilterDesignError(f"unstable design for {kind.value} {edges} at {fs} Hz")
    return cascade


def apply_iir(cascade: IIRCascade, rec: Recording, zero_phase: bool = False,
              max_workers: int = 1) -> Recording:
    """Filter every channel with ``cascade`` (zero initial conditions).

    Channels are independent; with ``max_workers > 1`` they are filtered in a
    thread pool and reassembled in channel order.
    """
    if not np.isclose(cascade.sample_rate_hz, rec.sample_rate_hz):
        raise SignalShapeError(
            f"sample-rate mismatch: cascade {cascade.sample_rate_hz} Hz, recording {rec.sample_rate_hz} Hz"
        )
    sos = cascade.sos
    data = np.asarray(rec.data, dtype=np.float64)
    run = signal.sosfiltfilt if zero_phase else signal.sosfilt

    if max_workers <= 1 or rec.n_channels == 1:
        return rec.with_data(run(sos, data, axis=1))

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        rows = list(executor.map(lambda row: run(sos, row), data))
    return rec.with_data(np.vstack(rows))


def make_filter_bank(start_hz: float = 0.5, stop_hz: float = 144.0, split_hz: float = 30.5,
                     narrow_width_hz: float = 2.0, wide_width_hz: float = 6.0,
                     n_bands: int = 35) -> FilterBankSpec:
    """Generate contiguous bands: narrow ones up to ``split_hz``, wide ones after.

    The last band is clipped to end at ``stop_hz``. When the range holds
    fewer than ``n_bands`` bands of the requested widths, the clipped final
    band is divided evenly until the count is reached.
    """
    bands: List[Tuple[float, float]] = []
    lo = start_hz
    while lo < stop_hz:
        width = narrow_width_hz if lo + narrow_width_hz <= split_hz else wide_width_hz
        hi = min(lo + width, stop_hz)
        bands.append((lo, hi))
        lo = hi
    if len(bands) > n_bands:
        raise FilterDesignError(f"range [{start_hz}, {stop_hz}] needs {len(bands)} bands, more than {n_bands}")

    missing = n_bands - len(bands)
    if missing:
        tail_lo, tail_hi = bands.pop()
        edges = np.linspace(tail_lo, tail_hi, missing + 2)
        bands.extend((float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]))
        bands[-1] = (bands[-1][0], stop_hz)
    return FilterBankSpec(bands=tuple(bands), min_hz=start_hz, max_hz=stop_hz)


def default_filter_bank() -> FilterBankSpec:
    """35 bands over [0.5, 144] Hz: 2 Hz wide up to 30.5 Hz, 6 Hz wide above."""
    return make_filter_bank()


def filter_bank_to_csv(bank: FilterBankSpec, path: PathLike):
    return write_csv(bank.to_frame(), path)


def _mask_segments(mask: np.ndarray) -> List[Tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def auto_clean(rec: Recording, max_abs_uv: float = DEFAULT_CLEAN_THRESHOLD_UV) -> CleaningResult:
    """Flag samples where any channel exceeds ``max_abs_uv`` in magnitude.

    The cleaned view has flagged samples set to 0 uV; ``epoch_trials``
    drops trials that overlap the returned mask.
    """
    if not max_abs_uv > 0:
        raise FilterDesignError(f"cleaning threshold must be positive, got {max_abs_uv}")

    data = np.asarray(rec.data)
    mask = np.any(np.abs(data) > max_abs_uv, axis=0)
    segments = _mask_segments(mask)
    if segments:
        cleaned = np.where(mask[None, :], 0.0, data)
        logger.info(f"[CLEAN] {int(mask.sum())} samples in {len(segments)} segments above {max_abs_uv} uV")
    else:
        cleaned = data
    return CleaningResult(recording=rec.with_data(cleaned), mask=mask, threshold_uv=max_abs_uv,
                          segments=segments)
