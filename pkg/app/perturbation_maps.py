"""
Perturbation Maps - mapas de correlação por perturbação da entrada

Adiciona ruído gaussiano aos trials, mede a variação das saídas
pré-softmax da rede e correlaciona essa variação com o próprio ruído
(por canal e amostra), agregando em bins de tempo. Inclui também a
distância L1 normalizada entre quadros consecutivos de vídeo.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from container_io import PathLike, read_csv, write_csv
from eeg_structures import ConfigurationError, ContainerFormatError, SignalShapeError, TrialSet

logger = logging.getLogger(__name__)

SIDECAR_NAME = "map.json"
FRAME_EXTENSIONS = (".pgm", ".ppm", ".pnm", ".png")


class PreSoftmaxModel(Protocol):
    def pre_softmax(self, batch: np.ndarray) -> np.ndarray:
        ...


@dataclass
class CorrelationMap:
    """Correlações [n_classes x n_channels x n_bins] em [-1, 1]."""
    values: np.ndarray
    bin_width_s: float
    t_range_s: Tuple[float, float]
    n_iterations: int
    seed: Optional[int] = None
    noise_scale: Optional[float] = None
    channel_names: Tuple[str, ...] = ()
    n_maps: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise SignalShapeError(f"map values must be 3-D, got shape {self.values.shape}")
        if np.any(np.abs(self.values) > 1.0 + 1e-12):
            raise SignalShapeError("correlation map entries outside [-1, 1]")
        self.t_range_s = (float(self.t_range_s[0]), float(self.t_range_s[1]))
        self.channel_names = tuple(self.channel_names)

    @property
    def n_bins(self) -> int:
        return self.values.shape[2]

    def bin_starts(self) -> np.ndarray:
        return self.t_range_s[0] + self.bin_width_s * np.arange(self.n_bins)

    def sidecar(self) -> Dict[str, Any]:
        return {
            "bin_width_s": self.bin_width_s,
            "t_range_s": list(self.t_range_s),
            "n_iterations": self.n_iterations,
            "n_bins": self.n_bins,
            "n_classes": self.values.shape[0],
            "n_channels": self.values.shape[1],
            "channel_names": list(self.channel_names),
            "seed": self.seed,
            "noise_scale": self.noise_scale,
            "n_maps": self.n_maps,
        }


@dataclass
class FrameSequence:
    """Quadros em tons de cinza [H x W] com intensidades em [0, 1]."""
    frames: List[np.ndarray]
    frame_rate_hz: float = 25.0
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = [np.asarray(frame, dtype=np.float64) for frame in self.frames]
        if not self.frame_rate_hz > 0:
            raise ConfigurationError(f"frame rate must be positive, got {self.frame_rate_hz}")
        for k, frame in enumerate(self.frames):
            if frame.ndim != 2:
                raise SignalShapeError(f"frame {k} is not a 2-D intensity matrix")
            if frame.shape != self.frames[0].shape:
                raise SignalShapeError(f"frame size mismatch: frame {k} is {frame.shape}, frame 0 is {self.frames[0].shape}")
            if frame.size and (frame.min() < 0.0 or frame.max() > 1.0):
                raise SignalShapeError(f"frame {k} has intensities outside [0, 1]")


# ---------------------------------------------------------------------------
# Correlation maps
# ---------------------------------------------------------------------------


def _correlate(noise: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Pearson correlation across trials for every (class, channel, sample)."""
    noise_c = noise - noise.mean(axis=0)
    delta_c = delta - delta.mean(axis=0)
    numerator = np.einsum("nct,nk->kct", noise_c, delta_c)
    noise_norm = np.sqrt(np.einsum("nct,nct->ct", noise_c, noise_c))
    delta_norm = np.sqrt(np.einsum("nk,nk->k", delta_c, delta_c))
    denominator = delta_norm[:, None, None] * noise_norm[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denominator > 0, numerator / np.where(denominator > 0, denominator, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


def _crop_slice(ts: TrialSet, t_range_s: Optional[Tuple[float, float]]) -> Tuple[slice, Tuple[float, float]]:
    start, end = ts.interval
    if t_range_s is None:
        return slice(0, ts.n_timepoints), (start, end)
    lo, hi = float(t_range_s[0]), float(t_range_s[1])
    if not (start - 1e-9 <= lo < hi <= end + 1e-9):
        raise ConfigurationError(f"time range {t_range_s} outside trial interval {ts.interval}")
    first = int(round((lo - start) * ts.sample_rate_hz))
    last = int(round((hi - start) * ts.sample_rate_hz))
    return slice(first, last), (lo, hi)


def bin_average(map_full: np.ndarray, bin_samples: int, sample_rate_hz: float = 1.0,
                t_start_s: float = 0.0, n_iterations: int = 1, **metadata) -> CorrelationMap:
    """Non-overlapping means of ``bin_samples`` along time; a trailing partial bin is dropped."""
    map_full = np.asarray(map_full, dtype=np.float64)
    if map_full.ndim != 3:
        raise SignalShapeError(f"map must be [n_classes x C x T], got shape {map_full.shape}")
    if bin_samples < 1:
        raise ConfigurationError(f"bin_samples must be >= 1, got {bin_samples}")
    n_classes, n_channels, n_times = map_full.shape
    if bin_samples > n_times:
        raise SignalShapeError(f"bin of {bin_samples} samples longer than the map ({n_times} samples)")

    n_bins = n_times // bin_samples
    binned = map_full[:, :, :n_bins * bin_samples].reshape(n_classes, n_channels, n_bins, bin_samples).mean(axis=3)
    bin_width = bin_samples / sample_rate_hz
    return CorrelationMap(values=binned, bin_width_s=bin_width, t_range_s=(t_start_s, t_start_s + n_bins * bin_width),
                          n_iterations=n_iterations, **metadata)


def perturbation_map(model: PreSoftmaxModel, ts: TrialSet, noise_scale: float = 0.5, n_iter: int = 30,
                     bin_s: float = 0.2, seed: int = 0, t_range_s: Optional[Tuple[float, float]] = None,
                     max_workers: int = 1) -> CorrelationMap:
    """Input-perturbation / prediction-change correlation map.

    Each iteration draws Gaussian noise with std ``noise_scale`` times the
    per-channel std of ``ts``, and correlates it across trials with the
    change of every pre-softmax output. Iteration ``i`` always uses the
    i-th child of ``seed``, whatever the worker count.
    """
    if not noise_scale > 0:
        raise ConfigurationError(f"noise_scale must be positive, got {noise_scale}")
    if n_iter < 1:
        raise ConfigurationError(f"n_iter must be >= 1, got {n_iter}")

    crop, (t_lo, t_hi) = _crop_slice(ts, t_range_s)
    bin_samples = int(round(bin_s * ts.sample_rate_hz))
    trials = np.asarray(ts.trials, dtype=np.float64)
    channel_std = trials.transpose(1, 0, 2).reshape(ts.n_channels, -1).std(axis=1)
    noise_std = (noise_scale * channel_std)[None, :, None]
    baseline = np.asarray(model.pre_softmax(trials), dtype=np.float64)

    def one_iteration(child: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(child)
        noise = rng.standard_normal(trials.shape) * noise_std
        delta = np.asarray(model.pre_softmax(trials + noise), dtype=np.float64) - baseline
        return _correlate(noise[:, :, crop], delta)

    children = np.random.SeedSequence(seed).spawn(n_iter)
    if max_workers <= 1:
        maps = [one_iteration(child) for child in children]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            maps = list(executor.map(one_iteration, children))
    mean_map = np.mean(maps, axis=0)

    logger.info(f"[PERTURB] {n_iter} iterations over {ts.n_trials} trials, range {t_lo}-{t_hi} s")
    cmap = bin_average(mean_map, bin_samples, ts.sample_rate_hz, t_start_s=t_lo, n_iterations=n_iter,
                       seed=seed, noise_scale=noise_scale, channel_names=ts.channel_names)
    cmap.values = np.clip(cmap.values, -1.0, 1.0)
    return cmap


def average_maps(maps: Sequence[CorrelationMap]) -> CorrelationMap:
    """Mean of maps sharing shape, bin width and time range."""
    if not maps:
        raise ConfigurationError("no maps to average")
    first = maps[0]
    for k, cmap in enumerate(maps[1:], start=1):
        if cmap.values.shape != first.values.shape:
            raise SignalShapeError(f"map {k} has shape {cmap.values.shape}, map 0 has {first.values.shape}")
        if not np.isclose(cmap.bin_width_s, first.bin_width_s) or not np.allclose(cmap.t_range_s, first.t_range_s):
            raise SignalShapeError(f"map {k} uses a different time binning")
    return CorrelationMap(
        values=np.mean([cmap.values for cmap in maps], axis=0),
        bin_width_s=first.bin_width_s,
        t_range_s=first.t_range_s,
        n_iterations=first.n_iterations,
        noise_scale=first.noise_scale,
        channel_names=first.channel_names,
        n_maps=sum(cmap.n_maps for cmap in maps),
    )


def map_to_csv(cmap: CorrelationMap, directory: PathLike) -> List[Path]:
    """One ``map_class{k}.csv`` per class (rows = channels, columns = bins) plus ``map.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_channels = cmap.values.shape[1]
    names = list(cmap.channel_names) or [f"ch{c}" for c in range(n_channels)]
    columns = [f"{start:.3f}" for start in cmap.bin_starts()]

    written = []
    for k in range(cmap.values.shape[0]):
        frame = pd.DataFrame(cmap.values[k], columns=columns)
        frame.insert(0, "channel", names)
        written.append(write_csv(frame, directory / f"map_class{k}.csv"))
    with open(directory / SIDECAR_NAME, "w", encoding="utf-8") as fh:
        json.dump(cmap.sidecar(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(directory / SIDECAR_NAME)
    return written


def load_map(directory: PathLike) -> CorrelationMap:
    """Read a map written by :func:`map_to_csv`."""
    directory = Path(directory)
    sidecar_file = directory / SIDECAR_NAME
    if not sidecar_file.is_file():
        raise ContainerFormatError(f"missing map sidecar: {sidecar_file}")
    with open(sidecar_file, "r", encoding="utf-8") as fh:
        meta = json.load(fh)

    values = []
    for k in range(int(meta["n_classes"])):
        frame = read_csv(directory / f"map_class{k}.csv", required_columns=("channel",))
        values.append(frame.drop(columns=["channel"]).to_numpy(dtype=np.float64))
    return CorrelationMap(
        values=np.stack(values),
        bin_width_s=float(meta["bin_width_s"]),
        t_range_s=tuple(meta["t_range_s"]),
        n_iterations=int(meta["n_iterations"]),
        seed=meta.get("seed"),
        noise_scale=meta.get("noise_scale"),
        channel_names=tuple(meta.get("channel_names", ())),
        n_maps=int(meta.get("n_maps", 1)),
    )


# ---------------------------------------------------------------------------
# Video frames
# ---------------------------------------------------------------------------


def l1_frame_distance(fs: FrameSequence) -> np.ndarray:
    """Mean absolute per-pixel change between consecutive frames."""
    if len(fs.frames) < 2:
        raise SignalShapeError(f"need at least 2 frames, got {len(fs.frames)}")
    stack = np.stack(fs.frames)
    return np.abs(np.diff(stack, axis=0)).mean(axis=(1, 2))


def load_frames(directory: PathLike, frame_rate_hz: float = 25.0) -> FrameSequence:
    """Read raster frames (sorted by file name) as luminance in [0, 1]."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS)
    if not files:
        raise ContainerFormatError(f"no frames ({', '.join(FRAME_EXTENSIONS)}) in {directory}")
    frames = []
    for path in files:
        try:
            with Image.open(path) as image:
                frames.append(np.asarray(image.convert("L"), dtype=np.float64) / 255.0)
        except OSError as exc:
            raise ContainerFormatError(f"unreadable frame {path}: {exc}") from exc
    return FrameSequence(frames=frames, frame_rate_hz=frame_rate_hz, names=[p.name for p in files])


def frame_distance_frame(fs: FrameSequence) -> pd.DataFrame:
    delta = l1_frame_distance(fs)
    pairs = np.arange(1, len(fs.frames))
    frame = pd.DataFrame({"frame_index": pairs, "time_s": pairs / fs.frame_rate_hz, "delta_norm": delta})
    if fs.names:
        frame.insert(1, "frame", fs.names[1:])
    return frame
