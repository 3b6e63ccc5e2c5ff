"""Adversarially trained PPG-to-ECG signal translation toolkit."""

from .signals import (
    BandpassSpec,
    ECG_BANDPASS,
    PIPELINE_RATE_HZ,
    PPG_BANDPASS,
    Segment,
    Waveform,
    bandpass,
    magnitude_spectrum,
    minmax_scale,
    resample,
    segment,
)
from .dataset import (
    PairStore,
    SegmentPair,
    SplitAssignment,
    SubjectRecord,
    build_pairs,
    iter_batches,
    load_subject,
    make_split,
)
from .models import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    parameter_count,
)
from .training import (
    TrainConfig,
    adversarial_loss,
    combined_generator_loss,
    freq_loss,
    seed_sweep,
    train,
)
from .evaluation import (
    EvalRecord,
    compare_distributions,
    detect_ppg_peaks,
    detect_qrs,
    evaluate_store,
    failure_count,
    heart_rate,
    mape,
)

__version__ = "0.1.0"
