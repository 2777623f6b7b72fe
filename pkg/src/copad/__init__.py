"""Joint spatio-temporal anomaly detection for multivariate time series.

A transformer encoder maps sliding windows to latent vectors that are scored
by a multivariate Gaussian/Student-t density or by a Gaussian/Student-t
copula with a learnable correlation, trained end to end with a contrastive
margin loss.
"""

from .dependency import DependencyModel
from .encoder import EncoderConfig, EncoderParams, encode, init_encoder
from .estimator import CopulaDetector, NotFittedError, check_series
from .evaluation import (MetricsReport, ScoredWindows, average_detection_delay,
                         classification_metrics, emit_report, estimate_mi,
                         select_threshold)
from .objective import LossConfig, contrastive_loss
from .pipeline import (Checkpoint, FrameSet, TrainConfig, load_checkpoint,
                       load_csv, make_frames, save_checkpoint, train)
from .synthdata import (LabeledSeries, ScenarioConfig, WarpConfig, case_preset,
                        generate_latent_series)

__version__ = "0.1.0"

__all__ = [
    "CopulaDetector", "NotFittedError", "check_series",
    "DependencyModel", "EncoderConfig", "EncoderParams", "encode",
    "init_encoder", "MetricsReport", "ScoredWindows",
    "average_detection_delay", "classification_metrics", "emit_report",
    "estimate_mi", "select_threshold", "LossConfig", "contrastive_loss",
    "Checkpoint", "FrameSet", "TrainConfig", "load_checkpoint", "load_csv",
    "make_frames", "save_checkpoint", "train", "LabeledSeries",
    "ScenarioConfig", "WarpConfig", "case_preset", "generate_latent_series",
]
