"""Convert one PPG-DaLiA pickle archive into an interchange-format directory.

Interchange format v1 (consumed by the ppg2ecg toolkit): a directory per
subject holding ``meta.json`` plus raw little-endian float32 channel files
``ppg.f32le`` (wrist, 64 Hz) and ``ecg.f32le`` (chest, 700 Hz). Float values
are written unmodified; all preprocessing lives downstream. No timestamps go
into any payload file, so converting the same archive twice is byte-identical.
"""
from __future__ import annotations

import json
import pickle
from pathlib import Path

import numpy as np

from . import __version__

PPG_RATE_HZ = 64.0
ECG_RATE_HZ = 700.0
ACTIVITY_RATE_HZ = 4.0

# Activity ids used by the original archives; 0 marks transient periods
# between the scripted activities.
ACTIVITY_CODES = {
    0: "transient",
    1: "sitting",
    2: "stairs",
    3: "table_soccer",
    4: "cycling",
    5: "driving",
    6: "lunch",
    7: "walking",
    8: "working",
}


class ConversionError(Exception):
    """The archive is unreadable or structurally unexpected."""


def _load_archive(path: Path) -> dict:
    try:
        with path.open("rb") as fh:
            data = pickle.load(fh, encoding="latin1")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise ConversionError(f"cannot read archive {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConversionError(f"archive {path} does not hold a dict")
    return data


def _channel(data: dict, location: str, name: str, path: Path) -> np.ndarray:
    try:
        raw = data["signal"][location][name]
    except (KeyError, TypeError):
        raise ConversionError(
            f"missing channel: no signal/{location}/{name} in {path}") from None
    arr = np.asarray(raw, dtype=np.float32)
    if arr.ndim == 2 and arr.shape[1] >= 1:
        arr = arr[:, 0]
    if arr.ndim != 1 or arr.size == 0:
        raise ConversionError(
            f"channel signal/{location}/{name} in {path} has shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _activity_spans(data: dict, path: Path) -> list[dict]:
    codes = np.asarray(data.get("activity", []), dtype=float).reshape(-1)
    if codes.size == 0:
        return []
    ids = codes.astype(int)
    unknown = sorted(set(ids) - set(ACTIVITY_CODES))
    if unknown:
        raise ConversionError(
            f"unknown activity code(s) {unknown} in {path}; "
            f"known codes are {sorted(ACTIVITY_CODES)}")
    spans = []
    start = 0
    for i in range(1, len(ids) + 1):
        if i == len(ids) or ids[i] != ids[start]:
            label = ACTIVITY_CODES[ids[start]]
            if label != "transient":
                spans.append({
                    "start_s": start / ACTIVITY_RATE_HZ,
                    "end_s": i / ACTIVITY_RATE_HZ,
                    "label": label,
                })
            start = i
    return spans


def _declared_rates(data: dict) -> dict:
    rates = data.get("sampling_rates", {})
    return rates if isinstance(rates, dict) else {}


def convert(archive_path: str | Path, out_dir: str | Path) -> Path:
    """Convert one archive; returns the subject directory that was written."""
    archive_path = Path(archive_path)
    out_dir = Path(out_dir)
    data = _load_archive(archive_path)

    subject = str(data.get("subject") or archive_path.stem)
    ppg = _channel(data, "wrist", "BVP", archive_path)
    ecg_raw = data["signal"]["chest"].get("ECG") if "signal" in data else None
    ecg = _channel(data, "chest", "ECG", archive_path)

    warnings: list[str] = []
    notes: list[str] = []
    ecg_arr = np.asarray(ecg_raw)
    if ecg_arr.ndim == 2 and ecg_arr.shape[1] > 1:
        notes.append(f"archive carried {ecg_arr.shape[1]} chest ECG columns; "
                     "kept the first (single provided chest lead)")

    declared = _declared_rates(data)
    ppg_rate = float(declared.get("ppg", PPG_RATE_HZ))
    ecg_rate = float(declared.get("ecg", ECG_RATE_HZ))
    if ppg_rate != PPG_RATE_HZ:
        warnings.append(f"archive declares PPG rate {ppg_rate} Hz "
                        f"(expected {PPG_RATE_HZ} Hz)")
    if ecg_rate != ECG_RATE_HZ:
        warnings.append(f"archive declares ECG rate {ecg_rate} Hz "
                        f"(expected {ECG_RATE_HZ} Hz)")

    subject_dir = out_dir / subject
    subject_dir.mkdir(parents=True, exist_ok=True)
    (subject_dir / "ppg.f32le").write_bytes(ppg.astype("<f4").tobytes())
    (subject_dir / "ecg.f32le").write_bytes(ecg.astype("<f4").tobytes())

    meta = {
        "subject": subject,
        "channels": {
            "ppg": {"rate_hz": ppg_rate, "count": int(ppg.size)},
            "ecg": {"rate_hz": ecg_rate, "count": int(ecg.size)},
        },
        "activities": _activity_spans(data, archive_path),
        "provenance": {
            "converter": f"dalia-import {__version__}",
            "source": archive_path.name,
            "warnings": warnings,
            "notes": notes,
        },
    }
    (subject_dir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return subject_dir
