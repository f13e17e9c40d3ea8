"""Few-step flow-matching waveform generation with adversarial fine-tuning.

Pipeline: pretrain a conditional vector-field estimator with the flow-matching
objective, freeze a small ODE step grid, fine-tune the resulting few-step
generator against a discriminator ensemble with feature-matching and
multi-scale mel losses, then evaluate with objective speech metrics.
"""

from .data import DatasetSpec, analysis_from_meta, load_audio, make_toy_corpus, save_audio
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    LengthError,
    ShapeError,
    TrainingDiverged,
    TurbowaveError,
)
from .evaluation import (
    BenchmarkResult,
    MetricReport,
    PitchTrack,
    benchmark_generation,
    emit_report,
    extract_pitch,
    mstft_distance,
    pitch_metrics,
)
from .flow import ProbabilityPath, TimeGrid, cfm_loss, fixed_step_generate, ode_sample
from .losses import (
    LossWeights,
    MultiScaleMelSpec,
    adv_d_loss,
    adv_g_loss,
    feature_matching_loss,
    final_generator_loss,
    multiscale_mel_loss,
)
from .model import DiscriminatorEnsemble, ModelScale, VectorFieldEstimator, count_parameters
from .signal import AudioBuffer, CqtConfig, MelConfig, StftConfig, mel_spectrogram
from .train import (
    TrainConfig,
    TrainState,
    copy_synthesize,
    finetune_turbo,
    load_checkpoint,
    load_generator,
    pretrain_fm,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "BenchmarkResult",
    "CheckpointError",
    "ConfigError",
    "CqtConfig",
    "DataError",
    "DatasetSpec",
    "DiscriminatorEnsemble",
    "LengthError",
    "LossWeights",
    "MelConfig",
    "MetricReport",
    "ModelScale",
    "MultiScaleMelSpec",
    "PitchTrack",
    "ProbabilityPath",
    "ShapeError",
    "StftConfig",
    "TimeGrid",
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "TurbowaveError",
    "VectorFieldEstimator",
    "adv_d_loss",
    "adv_g_loss",
    "analysis_from_meta",
    "benchmark_generation",
    "cfm_loss",
    "copy_synthesize",
    "count_parameters",
    "emit_report",
    "extract_pitch",
    "feature_matching_loss",
    "final_generator_loss",
    "finetune_turbo",
    "fixed_step_generate",
    "load_audio",
    "load_checkpoint",
    "load_generator",
    "make_toy_corpus",
    "mel_spectrogram",
    "mstft_distance",
    "multiscale_mel_loss",
    "ode_sample",
    "pitch_metrics",
    "pretrain_fm",
    "save_audio",
    "save_checkpoint",
    "__version__",
]
