"""Interchange-format loading, subject-disjoint splits, preprocessing into
aligned (PPG, ECG) window pairs, and deterministic shuffled batching.

Interchange format v1: one directory per subject holding

* ``meta.json`` -- ``{"subject": str, "channels": {"ppg": {"rate_hz", "count"},
  "ecg": {...}}, "activities": [{"start_s", "end_s", "label"}, ...]}``
* ``ppg.f32le`` / ``ecg.f32le`` -- raw little-endian float32 samples whose
  counts match the sidecar exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .signals import (
    ECG_BANDPASS,
    PIPELINE_RATE_HZ,
    PPG_BANDPASS,
    Segment,
    Waveform,
    bandpass_samples,
    minmax_scale_samples,
    resample,
    segment,
)

ACTIVITY_LABELS = (
    "sitting", "stairs", "table_soccer", "cycling", "driving",
    "lunch", "walking", "working", "transient",
)
ACTIVE_LABELS = frozenset(
    {"stairs", "table_soccer", "cycling", "driving", "walking", "working"})
TRANSIENT_LABEL = "transient"

TRAIN_WINDOW_S = 4.0
TRAIN_HOP_S = 2.0
EVAL_WINDOW_S = 10.0
EVAL_HOP_S = 2.0


class DatasetError(Exception):
    """Malformed or inconsistent interchange data."""


ActivitySpan = tuple[float, float, str]


@dataclass
class SubjectRecord:
    """One subject's synchronized raw channels plus activity annotations
    (kept in seconds so both channels map them identically after resampling)."""

    subject: str
    ppg: Waveform
    ecg: Waveform
    activities_s: tuple[ActivitySpan, ...] = ()


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        sets = (self.train, self.validation, self.test)
        total = sum(len(s) for s in sets)
        if len(self.train | self.validation | self.test) != total:
            raise ValueError("split sets must be pairwise disjoint")

    @property
    def all_subjects(self) -> frozenset[str]:
        return self.train | self.validation | self.test

    def subjects_for(self, split: str) -> frozenset[str]:
        return {"train": self.train, "validation": self.validation,
                "test": self.test}[split]


@dataclass(frozen=True, eq=False)
class SegmentPair:
    """Time-aligned PPG/ECG windows from the same subject and origin."""

    ppg: Segment
    ecg: Segment

    def __post_init__(self):
        if (self.ppg.subject != self.ecg.subject
                or self.ppg.origin_index != self.ecg.origin_index
                or self.ppg.activity_label != self.ecg.activity_label):
            raise ValueError("pair members must share subject, origin, and label")

    @property
    def subject(self) -> str:
        return self.ppg.subject

    @property
    def activity_label(self) -> str:
        return self.ppg.activity_label

    @property
    def origin_index(self) -> int:
        return self.ppg.origin_index


def _activities_to_indices(spans: Sequence[ActivitySpan], rate: float,
                           n: int) -> tuple[tuple[int, int, str], ...]:
    out = []
    for start_s, end_s, label in spans:
        s = min(max(int(round(start_s * rate)), 0), n)
        e = min(max(int(round(end_s * rate)), 0), n)
        if e > s:
            out.append((s, e, label))
    return tuple(out)


def _read_channel(path: Path, name: str, expected: int) -> np.ndarray:
    f = path / f"{name}.f32le"
    if not f.exists():
        raise DatasetError(f"missing channel file: {f}")
    raw = f.read_bytes()
    if len(raw) % 4 != 0 or len(raw) // 4 != expected:
        raise DatasetError(
            f"truncated channel '{name}': expected {expected} samples, "
            f"found {len(raw) / 4:g}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def load_subject(path: str | Path) -> SubjectRecord:
    """Load one interchange subject directory, validating counts and rates."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"missing metadata: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        subject = meta["subject"]
        channels = meta["channels"]
        spans = tuple((float(a["start_s"]), float(a["end_s"]), str(a["label"]))
                      for a in meta.get("activities", []))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed metadata in {meta_path}: {exc}") from exc

    waves = {}
    for name in ("ppg", "ecg"):
        if name not in channels:
            raise DatasetError(f"malformed metadata in {meta_path}: no '{name}' channel")
        rate = float(channels[name]["rate_hz"])
        count = int(channels[name]["count"])
        if rate <= 0:
            raise DatasetError(f"malformed metadata in {meta_path}: bad rate for {name}")
        samples = _read_channel(path, name, count)
        acts = _activities_to_indices(spans, rate, count)
        waves[name] = Waveform(samples=samples, rate=rate, channel=name,
                               subject=subject, activities=acts)

    for _, _, label in spans:
        if label not in ACTIVITY_LABELS:
            raise DatasetError(f"unknown activity label {label!r} in {meta_path}")

    ppg, ecg = waves["ppg"], waves["ecg"]
    if abs(ppg.duration_s - ecg.duration_s) > 1.0 / ppg.rate:
        raise DatasetError(
            f"rate mismatch: ppg spans {ppg.duration_s:.4f} s but ecg spans "
            f"{ecg.duration_s:.4f} s in {path}")
    return SubjectRecord(subject=subject, ppg=ppg, ecg=ecg, activities_s=spans)


def load_subjects(root: str | Path) -> list[SubjectRecord]:
    """Load every subject directory under ``root`` (sorted by name)."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no subject directories under {root}")
    return [load_subject(p) for p in dirs]


def make_split(subjects: Sequence[str], seed: int) -> SplitAssignment:
    """Seeded subject-disjoint split: 9/3/3 for 15 subjects, otherwise
    60/20/20 by count with the train set receiving remainders."""
    subjects = sorted(set(subjects))
    n = len(subjects)
    if n < 3:
        raise ValueError(f"need at least 3 subjects to split, got {n}")
    n_val = n // 5
    n_test = n // 5
    n_train = n - n_val - n_test
    order = list(np.random.default_rng(seed).permutation(subjects))
    return SplitAssignment(
        train=frozenset(order[:n_train]),
        validation=frozenset(order[n_train:n_train + n_val]),
        test=frozenset(order[n_train + n_val:]),
    )


@dataclass
class PreprocessReport:
    """Per-subject window counts plus the sensor-dropout exclusion tally."""

    pair_counts: dict[str, int] = field(default_factory=dict)
    excluded_flat_ecg: int = 0

    def add(self, subject: str, n_pairs: int, n_excluded: int) -> None:
        self.pair_counts[subject] = self.pair_counts.get(subject, 0) + n_pairs
        self.excluded_flat_ecg += n_excluded

    @property
    def total_pairs(self) -> int:
        return sum(self.pair_counts.values())


def build_pairs(record: SubjectRecord, window_s: float = TRAIN_WINDOW_S,
                hop_s: float = TRAIN_HOP_S,
                report: PreprocessReport | None = None) -> list[SegmentPair]:
    """Preprocess one subject into aligned window pairs.

    Pipeline order: resample to 128 Hz, window, bandpass per channel, min-max
    scale. ECG windows with zero dynamic range before scaling (sensor dropout)
    drop the whole pair and are tallied on ``report``.
    """
    ppg = resample(record.ppg, PIPELINE_RATE_HZ)
    ecg = resample(record.ecg, PIPELINE_RATE_HZ)
    # Rebuild annotations from the seconds-based spans so both 128 Hz channels
    # see bit-identical activity intervals regardless of native-rate rounding.
    n = min(len(ppg.samples), len(ecg.samples))
    acts = _activities_to_indices(record.activities_s, PIPELINE_RATE_HZ, n)
    ppg = Waveform(ppg.samples[:n], PIPELINE_RATE_HZ, "ppg", record.subject, acts)
    ecg = Waveform(ecg.samples[:n], PIPELINE_RATE_HZ, "ecg", record.subject, acts)

    ppg_segments = segment(ppg, window_s, hop_s)
    ecg_segments = segment(ecg, window_s, hop_s)
    pairs = []
    excluded = 0
    for sp, se in zip(ppg_segments, ecg_segments):
        # Sensor-dropout guard: a window that was constant at the source keeps
        # only ~1e-6 relative ripple through the polyphase resampler, far below
        # any physiological dynamic range.
        if np.ptp(se.samples) <= 1e-5 * max(np.max(np.abs(se.samples)), 1e-12):
            excluded += 1
            continue
        sp_f = bandpass_samples(sp.samples, PPG_BANDPASS, sp.rate)
        se_f = bandpass_samples(se.samples, ECG_BANDPASS, se.rate)
        pairs.append(SegmentPair(
            ppg=Segment(minmax_scale_samples(sp_f), sp.rate, "ppg",
                        sp.subject, sp.activity_label, sp.origin_index),
            ecg=Segment(minmax_scale_samples(se_f), se.rate, "ecg",
                        se.subject, se.activity_label, se.origin_index),
        ))
    if report is not None:
        report.add(record.subject, len(pairs), excluded)
    return pairs


@dataclass
class PairStore:
    """Columnar container for preprocessed pairs (what training/eval consume)."""

    ppg: np.ndarray        # (n, window) float32
    ecg: np.ndarray        # (n, window) float32
    subject: np.ndarray    # (n,) str
    activity: np.ndarray   # (n,) str
    origin: np.ndarray     # (n,) int64
    rate: float = PIPELINE_RATE_HZ

    def __len__(self) -> int:
        return len(self.ppg)

    @property
    def window(self) -> int:
        return self.ppg.shape[1]

    @classmethod
    def from_pairs(cls, pairs: Sequence[SegmentPair]) -> "PairStore":
        if not pairs:
            raise ValueError("cannot build a store from zero pairs")
        return cls(
            ppg=np.stack([p.ppg.samples for p in pairs]).astype(np.float32),
            ecg=np.stack([p.ecg.samples for p in pairs]).astype(np.float32),
            subject=np.array([p.subject for p in pairs]),
            activity=np.array([p.activity_label for p in pairs]),
            origin=np.array([p.origin_index for p in pairs], dtype=np.int64),
            rate=pairs[0].ppg.rate,
        )

    def save(self, path: str | Path) -> None:
        np.savez_compressed(path, ppg=self.ppg, ecg=self.ecg,
                            subject=self.subject, activity=self.activity,
                            origin=self.origin, rate=np.float64(self.rate))

    @classmethod
    def load(cls, path: str | Path) -> "PairStore":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"missing pair store: {path}")
        with np.load(path, allow_pickle=False) as z:
            return cls(ppg=z["ppg"], ecg=z["ecg"], subject=z["subject"],
                       activity=z["activity"], origin=z["origin"],
                       rate=float(z["rate"]))

    def select(self, mask: np.ndarray) -> "PairStore":
        return PairStore(self.ppg[mask], self.ecg[mask], self.subject[mask],
                         self.activity[mask], self.origin[mask], self.rate)


def build_store(records: Sequence[SubjectRecord], subjects: frozenset[str] | set[str],
                window_s: float, hop_s: float,
                report: PreprocessReport | None = None) -> PairStore:
    """Preprocess and concatenate all pairs for the given subject subset."""
    pairs: list[SegmentPair] = []
    for record in records:
        if record.subject in subjects:
            pairs.extend(build_pairs(record, window_s, hop_s, report=report))
    return PairStore.from_pairs(pairs)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """The (seed, epoch)-deterministic shuffle order used for batching."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(store: PairStore, batch_size: int, seed: int,
                 epoch: int, drop_last: bool = True,
                 ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled (ppg, ecg) batches of shape (b, 1, window) for one epoch.

    The order is a pure function of (seed, epoch); a trailing short batch is
    dropped by default to keep batch statistics stable.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(store), seed, epoch)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield (store.ppg[idx][:, None, :].astype(np.float32),
               store.ecg[idx][:, None, :].astype(np.float32))


def batches_per_epoch(n_pairs: int, batch_size: int, drop_last: bool = True) -> int:
    if drop_last:
        return n_pairs // batch_size
    return -(-n_pairs // batch_size)
