"""Deterministic DSP primitives: resampling, bandpass filtering, windowing,
amplitude scaling, and FFT magnitude spectra.

All functions are pure and operate on immutable inputs, so they are safe to
call concurrently. Conventions that downstream code relies on:

* resampling is windowed-sinc polyphase (Kaiser window, beta=8) with the
  anti-alias/anti-image cutoff at 0.9x the smaller Nyquist frequency;
* both bandpass designs are applied forward-backward (zero phase) so filter
  delay never desynchronizes paired channels;
* the DFT is the unnormalized forward transform; magnitude spectra cover
  bins 1..N/2 (DC excluded, Nyquist included).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

PIPELINE_RATE_HZ = 128.0

ActivityInterval = tuple[int, int, str]


@dataclass(frozen=True, eq=False)
class Waveform:
    """A uniformly sampled single-channel recording.

    ``activities`` is a sorted list of non-overlapping half-open sample-index
    intervals ``(start, end, label)`` within ``[0, len(samples))``.
    """

    samples: np.ndarray
    rate: float
    channel: str  # "ppg" | "ecg"
    subject: str = ""
    activities: tuple[ActivityInterval, ...] = ()

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.channel not in ("ppg", "ecg"):
            raise ValueError(f"unknown channel {self.channel!r}")
        object.__setattr__(self, "activities", tuple(self.activities))
        prev_end = 0
        for start, end, _label in self.activities:
            if start < prev_end or end < start or end > len(samples):
                raise ValueError("activity intervals must be sorted, disjoint, in range")
            prev_end = end

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate


@dataclass(frozen=True, eq=False)
class Segment:
    """A fixed-length window cut from a Waveform (512 samples for training,
    1280 for evaluation, both at 128 Hz in the standard pipeline)."""

    samples: np.ndarray
    rate: float
    channel: str
    subject: str = ""
    activity_label: str = "transient"
    origin_index: int = 0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class BandpassSpec:
    """Bandpass filter description.

    ``design`` is "cheby2" (Chebyshev type II, ``order``/``stopband_attenuation_db``)
    or "fir" (linear-phase Hamming-window design; ``num_taps`` defaults to
    3 * rate / low_hz rounded up to odd).
    """

    design: str
    low_hz: float
    high_hz: float
    order: int = 4
    stopband_attenuation_db: float = 40.0
    num_taps: int | None = None

    def __post_init__(self):
        if self.design not in ("cheby2", "fir"):
            raise ValueError(f"unknown filter design {self.design!r}")
        if not 0 < self.low_hz < self.high_hz:
            raise ValueError("need 0 < low_hz < high_hz")

    def taps_for_rate(self, rate: float) -> int:
        if self.num_taps is not None:
            return self.num_taps
        n = int(round(3.0 * rate / self.low_hz))
        return n if n % 2 == 1 else n + 1


PPG_BANDPASS = BandpassSpec(design="cheby2", low_hz=0.4, high_hz=8.0)
ECG_BANDPASS = BandpassSpec(design="fir", low_hz=3.0, high_hz=45.0)


def _resampler_filter(rate_in: float, rate_out: float, beta: float = 8.0):
    """Polyphase factors and the FIR low-pass for rate_in -> rate_out.

    The filter lives on the upsampled grid (rate_in * up) and cuts at 0.9x
    the smaller of the two Nyquist frequencies, which makes it both the
    anti-image filter (upsampling) and the anti-alias filter (downsampling).
    """
    frac = (Fraction(rate_out) / Fraction(rate_in)).limit_denominator(1000)
    up, down = frac.numerator, frac.denominator
    fs_up = rate_in * up
    cutoff = 0.9 * 0.5 * min(rate_in, rate_out)
    width = 0.2 * cutoff
    numtaps, _ = sps.kaiserord(60.0, width / (0.5 * fs_up))
    numtaps = 2 * (numtaps // 2) + 1
    taps = sps.firwin(numtaps, cutoff, window=("kaiser", beta), fs=fs_up)
    return up, down, taps


def resample_samples(x: np.ndarray, rate_in: float, rate_out: float) -> np.ndarray:
    """Resample a 1-D array to ``rate_out``; output length is round(n*out/in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot resample an empty signal")
    if rate_in == rate_out:
        return x.copy()
    up, down, taps = _resampler_filter(rate_in, rate_out)
    y = sps.resample_poly(x, up, down, window=taps)
    n_out = int(round(len(x) * rate_out / rate_in))
    return y[:n_out]


def resample(w: Waveform, target_rate: float) -> Waveform:
    """Resample a Waveform, remapping activity intervals proportionally."""
    if not target_rate > 0:
        raise ValueError("target_rate must be positive")
    y = resample_samples(w.samples, w.rate, target_rate)
    scale = target_rate / w.rate
    acts = []
    for start, end, label in w.activities:
        s = min(int(round(start * scale)), len(y))
        e = min(int(round(end * scale)), len(y))
        if e > s:
            acts.append((s, e, label))
    return Waveform(samples=y, rate=target_rate, channel=w.channel,
                    subject=w.subject, activities=tuple(acts))


def _design(spec: BandpassSpec, rate: float):
    if spec.high_hz >= rate / 2:
        raise ValueError(
            f"high edge {spec.high_hz} Hz must lie below Nyquist ({rate / 2} Hz)")
    if spec.design == "cheby2":
        return sps.cheby2(spec.order, spec.stopband_attenuation_db,
                          [spec.low_hz, spec.high_hz], btype="bandpass",
                          fs=rate, output="sos")
    taps = sps.firwin(spec.taps_for_rate(rate), [spec.low_hz, spec.high_hz],
                      pass_zero=False, fs=rate, window="hamming")
    return taps


def bandpass_samples(x: np.ndarray, spec: BandpassSpec, rate: float) -> np.ndarray:
    """Zero-phase bandpass of a 1-D array sampled at ``rate``."""
    x = np.asarray(x, dtype=np.float64)
    coeff = _design(spec, rate)
    if spec.design == "cheby2":
        return sps.sosfiltfilt(coeff, x)
    padlen = min(3 * (len(coeff) - 1), len(x) - 1)
    return sps.filtfilt(coeff, [1.0], x, padlen=padlen)


def bandpass(seg_or_wave, spec: BandpassSpec, rate: float | None = None):
    """Zero-phase bandpass; accepts a Waveform, a Segment, or a raw array
    (``rate`` required for arrays). Output has the same shape/type as input."""
    if isinstance(seg_or_wave, (Waveform, Segment)):
        y = bandpass_samples(seg_or_wave.samples, spec, seg_or_wave.rate)
        return replace(seg_or_wave, samples=y)
    if rate is None:
        raise ValueError("rate is required when filtering a bare array")
    return bandpass_samples(np.asarray(seg_or_wave), spec, rate)


def minmax_scale_samples(x: np.ndarray) -> np.ndarray:
    """Affine map onto [-1, 1]; a constant input maps to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot scale an empty signal")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo) * 2.0 - 1.0


def minmax_scale(seg):
    """Min-max scale a Segment (or raw array) onto [-1, 1]."""
    if isinstance(seg, Segment):
        return replace(seg, samples=minmax_scale_samples(seg.samples))
    return minmax_scale_samples(seg)


def _label_at(activities: tuple[ActivityInterval, ...], index: int) -> str:
    for start, end, label in activities:
        if start <= index < end:
            return label
    return "transient"


def segment(w: Waveform, window_s: float, hop_s: float) -> list[Segment]:
    """Cut overlapping windows of ``window_s`` seconds every ``hop_s`` seconds.

    Window i starts at sample i*hop; a too-short input yields an empty list.
    Each window is labeled with the activity covering its midpoint ("transient"
    when the midpoint falls outside every annotated interval).
    """
    window = window_s * w.rate
    hop = hop_s * w.rate
    if abs(window - round(window)) > 1e-9 or abs(hop - round(hop)) > 1e-9:
        raise ValueError("window_s and hop_s must be integer sample counts at this rate")
    window, hop = int(round(window)), int(round(hop))
    if hop < 1 or hop > window:
        raise ValueError("need 1 <= hop <= window")
    n = len(w.samples)
    if n < window:
        return []
    count = (n - window) // hop + 1
    out = []
    for i in range(count):
        start = i * hop
        mid = start + window // 2
        out.append(Segment(
            samples=w.samples[start:start + window],
            rate=w.rate,
            channel=w.channel,
            subject=w.subject,
            activity_label=_label_at(w.activities, mid),
            origin_index=start,
        ))
    return out


def segment_count(n_samples: int, window: int, hop: int) -> int:
    """Number of windows produced by ``segment`` for an n-sample input."""
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def magnitude_spectrum(x: np.ndarray) -> np.ndarray:
    """Moduli of DFT coefficients k = 1..N/2 (unnormalized; DC excluded)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    return np.abs(np.fft.rfft(x))[1:]
