"""Video anomaly detection by future-frame prediction with a tubelet Transformer."""

from .data import LabelSeries, SynthConfig, VideoSequence, load_dataset, synth_moving_dot, window_clips
from .estimator import ANDTDetector
from .evaluation import compute_threshold, delta_s, pca_project, roc_auc, score_video, threshold_metrics
from .model import ModelConfig, ModelParams, init_params, predict_next_frame, tiny_config
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ANDTDetector", "ModelConfig", "ModelParams", "TrainConfig", "VideoSequence", "LabelSeries",
    "SynthConfig", "init_params", "tiny_config", "predict_next_frame", "fit", "score_video",
    "load_dataset", "synth_moving_dot", "window_clips", "compute_threshold", "roc_auc",
    "threshold_metrics", "delta_s", "pca_project", "save_checkpoint", "load_checkpoint",
]
