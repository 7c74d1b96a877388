"""Container I/O for recordings, fitted models and tabular results.

A container is a directory holding ``header.json`` plus a raw little-endian
payload. Recordings store ``data.f32le`` (channel-major float32); models
store ``payload.bin`` with every array described by name/shape/dtype/offset
in the header.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple, Union

import numpy as np
import pandas as pd

from eeg_structures import (
    ConditionLabel,
    ContainerFormatError,
    EventMarker,
    Outcome,
    Recording,
    Robot,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_NAME = "header.json"
RECORDING_PAYLOAD = "data.f32le"
MODEL_PAYLOAD = "payload.bin"

_PAYLOAD_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}

PathLike = Union[str, Path]


def _ensure_output_dir(output_dir: Path) -> None:
    """Create the output directory if it does not exist."""
    output_dir.mkdir(parents=True, exist_ok=True)


def _write_header(path: Path, header: Mapping[str, Any]) -> None:
    with open(path / HEADER_NAME, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_header(path: Path) -> Dict[str, Any]:
    header_file = path / HEADER_NAME
    if not header_file.is_file():
        raise ContainerFormatError(f"missing header: {header_file}")
    try:
        with open(header_file, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ContainerFormatError(f"unreadable header {header_file}: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unknown format version: {version!r}")
    return header


# ---------------------------------------------------------------------------
# Recordings
# ---------------------------------------------------------------------------


def save_recording(rec: Recording, path: PathLike) -> Path:
    """Write ``rec`` as a container directory and return its path."""
    path = Path(path)
    _ensure_output_dir(path)

    header = {
        "format_version": FORMAT_VERSION,
        "sample_rate_hz": float(rec.sample_rate_hz),
        "channel_names": list(rec.channel_names),
        "n_channels": rec.n_channels,
        "n_samples": rec.n_samples,
        "events": [event.to_dict() for event in rec.events],
    }
    payload = np.ascontiguousarray(rec.data, dtype="<f4")
    try:
        _write_header(path, header)
        payload.tofile(path / RECORDING_PAYLOAD)
    except OSError as exc:
        raise ContainerFormatError(f"could not write container {path}: {exc}") from exc

    logger.debug(f"[CONTAINER] Saved recording {rec.summary()} -> {path}")
    return path


def load_recording(path: PathLike) -> Recording:
    """Read a recording container written by :func:`save_recording`."""
    path = Path(path)
    header = _read_header(path)

    try:
        sample_rate = float(header["sample_rate_hz"])
        channel_names = [str(name) for name in header["channel_names"]]
        raw_events = header.get("events", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerFormatError(f"incomplete header in {path}: {exc}") from exc
    if not sample_rate > 0:
        raise ContainerFormatError(f"invalid sample rate: {sample_rate}")

    n_channels = int(header.get("n_channels", len(channel_names)))
    if n_channels != len(channel_names):
        raise ContainerFormatError(
            f"channel count mismatch: header declares {n_channels}, lists {len(channel_names)} names"
        )

    payload_file = path / RECORDING_PAYLOAD
    if not payload_file.is_file():
        raise ContainerFormatError(f"missing payload: {payload_file}")
    flat = np.fromfile(payload_file, dtype="<f4")

    n_samples = header.get("n_samples")
    if n_samples is None:
        if flat.size % n_channels:
            raise ContainerFormatError(
                f"payload size mismatch: {flat.size} floats not divisible by {n_channels} channels"
            )
        n_samples = flat.size // n_channels
    if flat.size != n_channels * int(n_samples):
        raise ContainerFormatError(
            f"payload size mismatch: expected {n_channels} x {n_samples} floats, found {flat.size}"
        )

    try:
        events = [
            EventMarker(
                sample_index=int(item["sample_index"]),
                condition=ConditionLabel(Outcome(item["outcome"]), Robot(item["robot"])),
            )
            for item in raw_events
        ]
        rec = Recording(
            data=flat.reshape(n_channels, int(n_samples)).astype(np.float32, copy=False),
            sample_rate_hz=sample_rate,
            channel_names=tuple(channel_names),
            events=tuple(events),
        )
    except (KeyError, ValueError) as exc:
        raise ContainerFormatError(f"invalid container {path}: {exc}") from exc

    logger.debug(f"[CONTAINER] Loaded recording {rec.summary()} <- {path}")
    return rec


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------


def save_model_container(path: PathLike, model_kind: str, metadata: Mapping[str, Any],
                         arrays: Mapping[str, np.ndarray]) -> Path:
    """Persist named arrays plus JSON metadata in the container style.

    Arrays are written in insertion order; the header records each one's
    offset so the payload can be parsed without this library.
    """
    path = Path(path)
    _ensure_output_dir(path)

    entries: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype_name = str(array.dtype)
        if dtype_name not in _PAYLOAD_DTYPES:
            raise ContainerFormatError(f"array {name!r} has unsupported dtype {dtype_name}")
        raw = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[dtype_name]).tobytes()
        entries.append({
            "name": name,
            "shape": list(array.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "metadata": dict(metadata),
        "arrays": entries,
    }
    _write_header(path, header)
    with open(path / MODEL_PAYLOAD, "wb") as fh:
        for raw in chunks:
            fh.write(raw)

    logger.debug(f"[CONTAINER] Saved {model_kind} model ({len(entries)} arrays, {offset} bytes) -> {path}")
    return path


def load_model_container(path: PathLike) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    """Return ``(model_kind, metadata, arrays)`` from a model container."""
    path = Path(path)
    header = _read_header(path)
    if "model_kind" not in header:
        raise ContainerFormatError(f"{path} is not a model container")

    payload_file = path / MODEL_PAYLOAD
    if not payload_file.is_file():
        raise ContainerFormatError(f"missing payload: {payload_file}")
    blob = payload_file.read_bytes()

    arrays: Dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        dtype = _PAYLOAD_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerFormatError(f"unsupported dtype {entry['dtype']!r} in {path}")
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if start + nbytes > len(blob):
            raise ContainerFormatError(f"payload size mismatch for array {entry['name']!r}")
        values = np.frombuffer(blob[start:start + nbytes], dtype=dtype)
        arrays[entry["name"]] = values.reshape(entry["shape"]).astype(entry["dtype"])

    return header["model_kind"], header.get("metadata", {}), arrays


def read_model_kind(path: PathLike) -> str:
    """Model kind recorded in a container header."""
    header = _read_header(Path(path))
    if "model_kind" not in header:
        raise ContainerFormatError(f"{path} is not a model container")
    return str(header["model_kind"])


# ---------------------------------------------------------------------------
# Tabular output
# ---------------------------------------------------------------------------


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write a CSV with a header row and ``\\n`` line endings."""
    path = Path(path)
    _ensure_output_dir(path.parent)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_csv(path: PathLike, required_columns: Tuple[str, ...] = ()) -> pd.DataFrame:
    """Read a CSV and check that the expected columns are present."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ContainerFormatError(f"malformed CSV {path}: {exc}") from exc
    missing = [col for col in required_columns if col not in frame.columns]
    if missing:
        raise ContainerFormatError(f"malformed CSV {path}: missing columns {missing}")
    return frame
