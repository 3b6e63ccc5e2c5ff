import json
from pathlib import Path

import numpy as np
import pytest

from ppg2ecg.models import DiscriminatorConfig, GeneratorConfig
from ppg2ecg.training import TrainConfig


def synth_channels(duration_s: float, hr_hz: float, seed: int):
    """Plausible raw (ppg_64hz, ecg_700hz) arrays with a shared beat rate."""
    rng = np.random.default_rng(seed)
    t_ppg = np.arange(int(duration_s * 64)) / 64.0
    t_ecg = np.arange(int(duration_s * 700)) / 700.0
    ppg = (np.clip(np.cos(2 * np.pi * hr_hz * t_ppg), 0, None) ** 2
           + 0.05 * rng.normal(size=t_ppg.size))
    period = 1.0 / hr_hz
    ecg = 0.02 * rng.normal(size=t_ecg.size)
    beat = period / 2
    while beat < duration_s:
        ecg += 1.2 * np.exp(-0.5 * ((t_ecg - beat) / 0.015) ** 2)
        beat += period
    return ppg.astype(np.float32), ecg.astype(np.float32)


def write_interchange_subject(root: Path, subject: str, duration_s: float = 90.0,
                              hr_hz: float = 1.2, seed: int = 0,
                              activities=None) -> Path:
    """Create one interchange-format subject directory under ``root``."""
    if activities is None:
        third = duration_s / 3
        activities = [
            {"start_s": 0.0, "end_s": third, "label": "sitting"},
            {"start_s": third, "end_s": 2 * third, "label": "cycling"},
            {"start_s": 2 * third, "end_s": duration_s, "label": "walking"},
        ]
    ppg, ecg = synth_channels(duration_s, hr_hz, seed)
    subject_dir = root / subject
    subject_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject": subject,
        "channels": {
            "ppg": {"rate_hz": 64.0, "count": int(ppg.size)},
            "ecg": {"rate_hz": 700.0, "count": int(ecg.size)},
        },
        "activities": activities,
    }
    (subject_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    (subject_dir / "ppg.f32le").write_bytes(ppg.astype("<f4").tobytes())
    (subject_dir / "ecg.f32le").write_bytes(ecg.astype("<f4").tobytes())
    return subject_dir


@pytest.fixture
def interchange_root(tmp_path):
    root = tmp_path / "interchange"
    for i, hr in enumerate([1.0, 1.3, 1.6]):
        write_interchange_subject(root, f"S{i + 1}", duration_s=60.0,
                                  hr_hz=hr, seed=i)
    return root


def tiny_generator_config() -> GeneratorConfig:
    return GeneratorConfig(encoder_filters=(2, 2), encoder_strides=(2, 2),
                           kernel_size=3, input_length=16)


def tiny_discriminator_config() -> DiscriminatorConfig:
    return DiscriminatorConfig(filters=(2, 2), kernel_size=3)


def tiny_train_config(objective: str = "gan_freq", seed: int = 0,
                      **overrides) -> TrainConfig:
    epochs = overrides.get("epochs", 2)
    defaults = dict(
        objective=objective,
        seed=seed,
        epochs=epochs,
        lr_constant_epochs=min(1, epochs - 1),
        batch_size=4,
        generator=GeneratorConfig(encoder_filters=(4, 8),
                                  encoder_strides=(2, 2),
                                  kernel_size=4, input_length=64),
        discriminator=DiscriminatorConfig(filters=(4, 8), kernel_size=4),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def tiny_store(n_pairs: int = 16, window: int = 64, seed: int = 0):
    from ppg2ecg.dataset import PairStore
    rng = np.random.default_rng(seed)
    return PairStore(
        ppg=rng.uniform(-1, 1, size=(n_pairs, window)).astype(np.float32),
        ecg=rng.uniform(-1, 1, size=(n_pairs, window)).astype(np.float32),
        subject=np.array(["toy"] * n_pairs),
        activity=np.array(["sitting"] * n_pairs),
        origin=np.arange(n_pairs, dtype=np.int64),
        rate=128.0,
    )
