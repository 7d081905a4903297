"""scikit-learn style front end for the anomaly detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from ._validation import check_videos
from .data import VideoSequence
from .evaluation import compute_threshold, roc_auc, score_video
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train


class ANDTDetector(TransformerMixin, BaseEstimator):
    """Frame-level video anomaly detector trained on normal videos only.

    ``fit`` learns to predict the next frame (or reconstruct frames, depending
    on ``mode``) from ``n_frames`` preceding frames. Frames whose prediction
    error exceeds ``threshold_`` (mean + std of training errors) are anomalous.

    Videos are ``T x C x H x W`` arrays (or :class:`~andt.data.VideoSequence`)
    with intensities in [0, 1]; methods accept one video or a list of videos.

    Parameters mirror :class:`~andt.model.ModelConfig` and
    :class:`~andt.training.TrainConfig`; ``frame_size`` sets both height and
    width and ``patch_size`` both patch extents.
    """

    def __init__(self, n_frames=6, frame_size=256, channels=3, tubelet_t=2, patch_size=16,
                 embed_dim=768, n_layers=2, n_heads=6, mlp_size=4096, mlp_activation="gelu",
                 fc_hidden=2048, decoder_base=8, decoder_channels=(512, 256, 128, 64, 32, 32),
                 mode="prediction-1", learning_rate=2e-4, batch_size=4, epochs=1,
                 precision="float64", clip_norm=None, stride=1, max_steps=None, random_state=0):
        self.n_frames = n_frames
        self.frame_size = frame_size
        self.channels = channels
        self.tubelet_t = tubelet_t
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.mlp_size = mlp_size
        self.mlp_activation = mlp_activation
        self.fc_hidden = fc_hidden
        self.decoder_base = decoder_base
        self.decoder_channels = decoder_channels
        self.mode = mode
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.precision = precision
        self.clip_norm = clip_norm
        self.stride = stride
        self.max_steps = max_steps
        self.random_state = random_state

    def _configs(self):
        model_cfg = M.ModelConfig(
            n_frames=self.n_frames, height=self.frame_size, width=self.frame_size,
            channels=self.channels, tubelet_t=self.tubelet_t, patch_h=self.patch_size,
            patch_w=self.patch_size, embed_dim=self.embed_dim, n_layers=self.n_layers,
            n_heads=self.n_heads, mlp_size=self.mlp_size, mlp_activation=self.mlp_activation,
            fc_hidden=self.fc_hidden, decoder_base=self.decoder_base,
            decoder_channels=tuple(self.decoder_channels),
            out_frames=self.n_frames if self.mode == "reconstruction-6" else 1,
            seed=self.random_state)
        train_cfg = TrainConfig(
            mode=self.mode, learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.random_state, precision=self.precision,
            clip_norm=self.clip_norm, stride=self.stride)
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        """Train on normal videos. ``y`` is ignored."""
        model_cfg, train_cfg = self._configs()
        videos = check_videos(X, channels=model_cfg.channels,
                              frame_shape=(model_cfg.height, model_cfg.width))
        seqs = [VideoSequence(v, source_id=f"train_{i}") for i, v in enumerate(videos)]
        params, state, history = train(seqs, model_cfg, train_cfg, max_steps=self.max_steps)
        self.model_config_ = model_cfg
        self.train_config_ = train_cfg
        self.params_ = params
        self.opt_state_ = state
        self.history_ = history
        errors = np.concatenate([self._score(v).scores[model_cfg.n_frames:] for v in videos])
        self.threshold_ = compute_threshold(errors)
        return self

    def _score(self, video):
        return score_video(self.params_, self.model_config_, video, mode=self.train_config_.mode)

    def _each(self, X, fn):
        check_is_fitted(self, "params_")
        cfg = self.model_config_
        single = isinstance(X, VideoSequence) or (isinstance(X, np.ndarray) and X.ndim in (3, 4))
        videos = check_videos(X, channels=cfg.channels, frame_shape=(cfg.height, cfg.width))
        out = [fn(v) for v in videos]
        return out[0] if single else out

    def score_samples(self, X):
        """Per-frame anomaly scores (mean squared prediction error).

        The first ``n_frames`` frames repeat the first computed score.
        """
        return self._each(X, lambda v: self._score(v).scores)

    def decision_function(self, X):
        """Scores shifted by the threshold; positive values are anomalous."""
        return self._each(X, lambda v: self._score(v).scores - self.threshold_)

    def predict(self, X):
        """Frame labels: 1 for anomalous (score > threshold), 0 for normal."""
        return self._each(X, lambda v: (self._score(v).scores > self.threshold_).astype(np.int64))

    def transform(self, X):
        """Encoder feature ``p`` for every scored frame (``(T - n_frames) x embed_dim``)."""
        def feats(v):
            return score_video(self.params_, self.model_config_, v, mode=self.train_config_.mode,
                               return_features=True).features
        return self._each(X, feats)

    def score(self, X, y):
        """Frame-level AUC on labelled videos (backfilled leading frames excluded)."""
        scores = self.score_samples(X)
        if isinstance(scores, np.ndarray):
            scores, y = [scores], [y]
        t_len = self.model_config_.n_frames
        s = np.concatenate([sc[t_len:] for sc in scores])
        lab = np.concatenate([np.asarray(getattr(l, "labels", l))[t_len:] for l in y])
        return roc_auc(s, lab)[1]

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "params_")
        return Checkpoint(self.model_config_, self.params_, self.opt_state_, self.history_,
                          self.train_config_, {"threshold": self.threshold_})

    def save(self, path):
        save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt):
        """Rebuild a fitted detector from a :class:`Checkpoint` or a file path."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        mc = ckpt.model_config
        tc = ckpt.train_config or TrainConfig()
        est = cls(n_frames=mc.n_frames, frame_size=mc.height, channels=mc.channels, tubelet_t=mc.tubelet_t,
                  patch_size=mc.patch_h, embed_dim=mc.embed_dim, n_layers=mc.n_layers, n_heads=mc.n_heads,
                  mlp_size=mc.mlp_size, mlp_activation=mc.mlp_activation, fc_hidden=mc.fc_hidden,
                  decoder_base=mc.decoder_base, decoder_channels=mc.decoder_channels, mode=tc.mode,
                  learning_rate=tc.learning_rate, batch_size=tc.batch_size, epochs=tc.epochs,
                  precision=tc.precision, clip_norm=tc.clip_norm, stride=tc.stride, random_state=tc.seed)
        est.model_config_ = mc
        est.train_config_ = tc
        est.params_ = ckpt.params
        est.opt_state_ = ckpt.opt_state
        est.history_ = ckpt.history
        est.threshold_ = ckpt.extra.get("threshold", np.inf)
        return est
