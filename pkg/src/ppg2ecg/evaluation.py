"""Heart-rate extraction from real/synthetic ECG and from PPG, MAPE scoring,
failure accounting, activity subsetting, and seed-distribution statistics.

Heart rates are reported in beats/min; estimates outside [20, 300] bpm and
windows with fewer than two detected peaks are failures (``None``), never
exceptions. Every operation here is deterministic and side-effect free, so
windows can be evaluated in parallel and reduced in any order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import signal as sps
from scipy import stats as scipy_stats

from .dataset import ACTIVE_LABELS, ACTIVITY_LABELS, TRANSIENT_LABEL, PairStore
from .models import Generator

HR_MIN_BPM = 20.0
HR_MAX_BPM = 300.0

# QRS detector constants (Hamilton-style energy pipeline).
QRS_BAND_HZ = (8.0, 16.0)
QRS_SMOOTH_S = 0.08
QRS_REFRACTORY_S = 0.2
QRS_THRESHOLD_FRACTION = 0.475
QRS_MISSED_BEAT_FACTOR = 1.5

# PPG systolic detector constants (two-moving-average scheme, published defaults).
PPG_BAND_HZ = (0.5, 8.0)
PPG_PEAK_WINDOW_S = 0.111
PPG_BEAT_WINDOW_S = 0.667
PPG_THRESHOLD_OFFSET = 0.02


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    width = max(1, int(width))
    return np.convolve(x, np.ones(width) / width, mode="same")


def detect_qrs(ecg: np.ndarray, rate: float) -> np.ndarray:
    """R-peak indices in a 10-second ECG window.

    Pipeline: zero-phase 8-16 Hz bandpass, differentiate, rectify, 80 ms
    moving average, then adaptive noise/QRS thresholds with a 200 ms
    refractory period and a missed-beat backtrack at 1.5x the running RR
    median. Returned indices are strictly increasing and >= 200 ms apart.
    """
    ecg = np.asarray(ecg, dtype=np.float64)
    n = len(ecg)
    refractory = int(round(QRS_REFRACTORY_S * rate))
    if n < 2 * refractory or not np.any(ecg != ecg[0]):
        return np.array([], dtype=int)
    sos = sps.butter(2, QRS_BAND_HZ, btype="bandpass", fs=rate, output="sos")
    filtered = sps.sosfiltfilt(sos, ecg)
    energy = _moving_average(np.abs(np.diff(filtered, prepend=filtered[0])),
                             round(QRS_SMOOTH_S * rate))
    if not np.any(energy > 0):
        return np.array([], dtype=int)
    candidates, _ = sps.find_peaks(energy, distance=refractory)
    if len(candidates) == 0:
        return np.array([], dtype=int)

    # Seed the running QRS level from per-second maxima so the threshold is
    # sensible from the first candidate onward.
    sec = max(1, int(rate))
    seeds = [energy[i:i + sec].max() for i in range(0, n, sec)]
    qrs_levels = list(np.sort(seeds)[-8:])
    noise_levels = [0.0]
    beats: list[int] = []
    rejected: list[int] = []

    def threshold() -> float:
        noise = float(np.median(noise_levels))
        return noise + QRS_THRESHOLD_FRACTION * (float(np.median(qrs_levels)) - noise)

    for cand in candidates:
        if energy[cand] > threshold() and (not beats or cand - beats[-1] >= refractory):
            beats.append(int(cand))
            qrs_levels = (qrs_levels + [float(energy[cand])])[-8:]
        else:
            rejected.append(int(cand))
            noise_levels = (noise_levels + [float(energy[cand])])[-8:]
        if len(beats) >= 2:
            rr = float(np.median(np.diff(beats)))
            if cand - beats[-1] > QRS_MISSED_BEAT_FACTOR * rr:
                window = [r for r in rejected
                          if beats[-1] + refractory <= r <= cand - refractory
                          and energy[r] > 0.5 * threshold()]
                if window:
                    recovered = max(window, key=lambda r: energy[r])
                    beats.append(recovered)
                    beats.sort()
                    rejected.remove(recovered)

    # Refine each detection to the nearest extremum of the bandpassed signal.
    half = int(round(0.06 * rate))
    refined = sorted({min(n - 1, max(0, lo + int(np.argmax(np.abs(filtered[lo:hi])))))
                      for b in beats
                      for lo, hi in [(max(0, b - half), min(n, b + half + 1))]})
    peaks: list[int] = []
    for r in refined:
        if not peaks or r - peaks[-1] >= refractory:
            peaks.append(r)
    return np.array(peaks, dtype=int)


def detect_ppg_peaks(ppg: np.ndarray, rate: float) -> np.ndarray:
    """Systolic peak indices in a 10-second PPG window.

    The squared, positive-clipped signal is compared against two moving
    averages (111 ms peak window vs 667 ms beat window plus a small
    mean-scaled offset); blocks of interest wider than the peak window each
    contribute the argmax of the bandpassed signal.
    """
    ppg = np.asarray(ppg, dtype=np.float64)
    n = len(ppg)
    w_peak = int(round(PPG_PEAK_WINDOW_S * rate))
    if n < 2 * w_peak or not np.any(ppg != ppg[0]):
        return np.array([], dtype=int)
    sos = sps.butter(2, PPG_BAND_HZ, btype="bandpass", fs=rate, output="sos")
    filtered = sps.sosfiltfilt(sos, ppg)
    squared = np.clip(filtered, 0.0, None) ** 2
    ma_peak = _moving_average(squared, w_peak)
    ma_beat = _moving_average(squared, round(PPG_BEAT_WINDOW_S * rate))
    interest = ma_peak > ma_beat + PPG_THRESHOLD_OFFSET * float(np.mean(squared))
    if not np.any(interest):
        return np.array([], dtype=int)
    runs = np.split(np.flatnonzero(interest),
                    np.flatnonzero(np.diff(np.flatnonzero(interest)) > 1) + 1)
    peaks = sorted({int(run[0] + np.argmax(filtered[run[0]:run[-1] + 1]))
                    for run in runs if len(run) >= w_peak})
    return np.array(peaks, dtype=int)


def heart_rate(peaks: Sequence[int] | np.ndarray, rate: float) -> float | None:
    """60 / mean inter-peak interval, or None for <2 peaks / out of range."""
    peaks = np.asarray(peaks)
    if len(peaks) < 2:
        return None
    bpm = 60.0 / float(np.mean(np.diff(peaks)) / rate)
    if not (HR_MIN_BPM <= bpm <= HR_MAX_BPM):
        return None
    return bpm


@dataclass
class EvalRecord:
    subject: str
    activity_label: str
    origin_index: int
    hr_real: float | None
    hr_synth: float | None
    hr_ppg: float | None = None


@dataclass
class MapeSummary:
    subset: str
    mape_percent: float
    n_windows: int          # windows with a defined ground-truth heart rate
    n_failures: int         # of those, windows where the estimate failed
    n_real_failures: int    # windows dropped because the real ECG failed
    source: str = "synth"
    failure_mode: str = "exclude"


SUBSETS = ("all", "active", "not_active")


def activity_subset(records: Iterable[EvalRecord], mode: str) -> list[EvalRecord]:
    """Filter windows by activity: "all" excludes only "transient"; "active"
    keeps the six high-motion labels; "not_active" keeps the labeled rest."""
    if mode not in SUBSETS:
        raise ValueError(f"unknown subset {mode!r}")
    out = []
    for rec in records:
        label = rec.activity_label
        if label not in ACTIVITY_LABELS:
            raise ValueError(f"unknown activity label {label!r}")
        if label == TRANSIENT_LABEL:
            continue
        if mode == "active" and label not in ACTIVE_LABELS:
            continue
        if mode == "not_active" and label in ACTIVE_LABELS:
            continue
        out.append(rec)
    return out


def mape(records: Sequence[EvalRecord], subset: str = "all",
         source: str = "synth", failure_mode: str = "exclude") -> MapeSummary:
    """Mean absolute percentage error of estimated vs real heart rate.

    Windows whose real ECG failed detection are dropped entirely (their
    ground truth is undefined) and tallied separately. Windows whose estimate
    failed are excluded from the mean (``failure_mode="exclude"``, default)
    or charged 100% error (``failure_mode="penalize"``).
    """
    if source not in ("synth", "ppg"):
        raise ValueError(f"unknown estimate source {source!r}")
    if failure_mode not in ("exclude", "penalize"):
        raise ValueError(f"unknown failure_mode {failure_mode!r}")
    chosen = activity_subset(records, subset)
    if not chosen:
        raise ValueError(f"no windows left in subset {subset!r}")
    with_truth = [r for r in chosen if r.hr_real is not None]
    n_real_failures = len(chosen) - len(with_truth)
    estimates = [(r.hr_real, r.hr_synth if source == "synth" else r.hr_ppg)
                 for r in with_truth]
    terms = [abs(real - est) / real for real, est in estimates if est is not None]
    n_failures = len(estimates) - len(terms)
    if failure_mode == "penalize":
        terms = terms + [1.0] * n_failures
    if not terms:
        raise ValueError(f"no scorable windows in subset {subset!r}")
    return MapeSummary(
        subset=subset,
        mape_percent=100.0 * float(np.mean(terms)),
        n_windows=len(with_truth),
        n_failures=n_failures,
        n_real_failures=n_real_failures,
        source=source,
        failure_mode=failure_mode,
    )


def failure_count(records: Iterable[EvalRecord], source: str = "synth") -> int:
    """Windows with a defined real heart rate whose estimate failed."""
    return sum(1 for r in records
               if r.hr_real is not None
               and (r.hr_synth if source == "synth" else r.hr_ppg) is None)


@dataclass
class SeedDistribution:
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    t_statistic: float
    p_value: float
    df: int
    degenerate: bool = False


def compare_distributions(a: Sequence[float], b: Sequence[float]) -> SeedDistribution:
    """Pooled-variance (Student) two-sample t-test, df = n_a + n_b - 2,
    two-sided p. Zero pooled variance is flagged instead of raising.

    The usual normality caveat applies; callers printing these numbers should
    say so (report rendering does).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per distribution")
    df = len(a) + len(b) - 2
    pooled = ((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / df
    diff = float(a.mean() - b.mean())
    if pooled == 0.0:
        t = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
        p = 1.0 if diff == 0.0 else 0.0
        degenerate = True
    else:
        t = diff / math.sqrt(pooled * (1.0 / len(a) + 1.0 / len(b)))
        p = 2.0 * float(scipy_stats.t.sf(abs(t), df))
        degenerate = False
    return SeedDistribution(
        mean_a=float(a.mean()), std_a=float(a.std(ddof=1)),
        mean_b=float(b.mean()), std_b=float(b.std(ddof=1)),
        t_statistic=float(t), p_value=float(p), df=df, degenerate=degenerate,
    )


def synthesize(generator: Generator, ppg: np.ndarray,
               batch_size: int = 64) -> np.ndarray:
    """Run the generator over (n, window) PPG arrays without gradients."""
    generator.eval()
    outputs = []
    with torch.no_grad():
        for lo in range(0, len(ppg), batch_size):
            x = torch.from_numpy(ppg[lo:lo + batch_size][:, None, :].astype(np.float32))
            outputs.append(generator(x).squeeze(1).numpy())
    return np.concatenate(outputs, axis=0)


def evaluate_store(generator: Generator, store: PairStore,
                   with_ppg_baseline: bool = False,
                   batch_size: int = 64) -> list[EvalRecord]:
    """Produce one EvalRecord per window of a (10-second) pair store."""
    synth = synthesize(generator, store.ppg, batch_size=batch_size)
    records = []
    for i in range(len(store)):
        hr_real = heart_rate(detect_qrs(store.ecg[i], store.rate), store.rate)
        hr_synth = heart_rate(detect_qrs(synth[i], store.rate), store.rate)
        hr_ppg = None
        if with_ppg_baseline:
            hr_ppg = heart_rate(detect_ppg_peaks(store.ppg[i], store.rate), store.rate)
        records.append(EvalRecord(
            subject=str(store.subject[i]),
            activity_label=str(store.activity[i]),
            origin_index=int(store.origin[i]),
            hr_real=hr_real, hr_synth=hr_synth, hr_ppg=hr_ppg,
        ))
    return records


def summarize(records: Sequence[EvalRecord], with_ppg_baseline: bool = False,
              failure_mode: str = "exclude") -> dict:
    """Per-subset MAPE plus failure tallies, as a JSON-ready dict."""
    out: dict = {"n_windows": len(records), "failure_mode": failure_mode,
                 "subsets": {}, "ppg_baseline": None}
    for subset in SUBSETS:
        try:
            s = mape(records, subset=subset, failure_mode=failure_mode)
            out["subsets"][subset] = {
                "mape_percent": s.mape_percent, "n_windows": s.n_windows,
                "n_failures": s.n_failures, "n_real_failures": s.n_real_failures,
            }
        except ValueError:
            out["subsets"][subset] = None
    out["n_synth_failures"] = failure_count(records)
    if with_ppg_baseline:
        baseline = {}
        for subset in SUBSETS:
            try:
                s = mape(records, subset=subset, source="ppg",
                         failure_mode=failure_mode)
                baseline[subset] = {
                    "mape_percent": s.mape_percent, "n_windows": s.n_windows,
                    "n_failures": s.n_failures,
                }
            except ValueError:
                baseline[subset] = None
        out["ppg_baseline"] = baseline
        out["n_ppg_failures"] = failure_count(records, source="ppg")
    return out


def write_report(records: Sequence[EvalRecord], out_dir: str | Path,
                 with_ppg_baseline: bool = False, failure_mode: str = "exclude",
                 seed_stats: dict | None = None) -> tuple[Path, Path]:
    """Write report.json (summary) and report.csv (one row per window)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(records, with_ppg_baseline, failure_mode)
    if seed_stats is not None:
        summary["seed_stats"] = seed_stats
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(summary, indent=2, allow_nan=True))
    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "activity", "origin_index", "hr_real",
                         "hr_synth", "hr_ppg_baseline", "real_failed",
                         "synth_failed", "ppg_failed"])
        for r in records:
            writer.writerow([
                r.subject, r.activity_label, r.origin_index,
                "" if r.hr_real is None else f"{r.hr_real:.4f}",
                "" if r.hr_synth is None else f"{r.hr_synth:.4f}",
                "" if r.hr_ppg is None else f"{r.hr_ppg:.4f}",
                int(r.hr_real is None), int(r.hr_synth is None),
                int(r.hr_ppg is None),
            ])
    return json_path, csv_path


def read_report(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable report file {path}: {exc}") from exc
