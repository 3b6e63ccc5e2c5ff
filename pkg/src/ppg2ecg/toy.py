"""Synthetic paired dataset for CPU-scale end-to-end checks.

Each pair shares one latent beat sequence: the input is a smoothed pulse
train (raised-cosine bumps, PPG-like) and the target is the deterministic
sharpened-spike transform of the same beats (narrow Gaussian spikes,
ECG-like). A model that learns to sharpen bumps into spikes preserves beat
timing, so heart rate survives translation and toy MAPE is meaningful.
"""
from __future__ import annotations

import numpy as np

from .dataset import PairStore
from .models import DiscriminatorConfig, GeneratorConfig
from .signals import PIPELINE_RATE_HZ, minmax_scale_samples
from .training import TrainConfig

TOY_BPM_RANGE = (50.0, 150.0)
TOY_BUMP_HALF_WIDTH_S = 0.25
TOY_SPIKE_SIGMA_S = 0.02


def _beat_times(bpm: float, phase: float, seconds: float) -> np.ndarray:
    period = 60.0 / bpm
    first = phase * period
    return np.arange(first, seconds, period)


def toy_pair(bpm: float, phase: float, window: int,
             rate: float = PIPELINE_RATE_HZ) -> tuple[np.ndarray, np.ndarray]:
    """(smoothed pulse train, sharpened spike train) for one beat sequence."""
    t = np.arange(window) / rate
    beats = _beat_times(bpm, phase, window / rate)
    x = np.zeros(window)
    y = np.zeros(window)
    for b in beats:
        x += np.clip(np.cos(np.pi * (t - b) / (2 * TOY_BUMP_HALF_WIDTH_S)), 0, None) ** 2 \
            * (np.abs(t - b) < 2 * TOY_BUMP_HALF_WIDTH_S)
        y += np.exp(-0.5 * ((t - b) / TOY_SPIKE_SIGMA_S) ** 2)
    return minmax_scale_samples(x), minmax_scale_samples(y)


def toy_store(n_pairs: int, seed: int, window: int = 512,
              rate: float = PIPELINE_RATE_HZ) -> PairStore:
    """A PairStore of ``n_pairs`` toy windows with random rates and phases."""
    rng = np.random.default_rng(seed)
    ppg = np.empty((n_pairs, window), dtype=np.float32)
    ecg = np.empty((n_pairs, window), dtype=np.float32)
    for i in range(n_pairs):
        bpm = rng.uniform(*TOY_BPM_RANGE)
        phase = rng.uniform(0.0, 1.0)
        x, y = toy_pair(bpm, phase, window, rate)
        ppg[i], ecg[i] = x, y
    return PairStore(
        ppg=ppg, ecg=ecg,
        subject=np.array(["toy"] * n_pairs),
        activity=np.array(["sitting"] * n_pairs),
        origin=np.arange(n_pairs, dtype=np.int64),
        rate=rate,
    )


def toy_train_config(seed: int, objective: str = "gan_freq",
                     epochs: int = 5) -> TrainConfig:
    """Standard training recipe scaled down to CPU size: filters (16, 32, 64)."""
    return TrainConfig(
        objective=objective,
        seed=seed,
        epochs=epochs,
        lr_constant_epochs=min(2, epochs - 1),
        batch_size=32,
        generator=GeneratorConfig(encoder_filters=(16, 32, 64),
                                  encoder_strides=(2, 2, 2)),
        discriminator=DiscriminatorConfig(filters=(16, 32, 64)),
    )
