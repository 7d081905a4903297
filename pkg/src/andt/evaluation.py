"""Frame scoring, thresholds, ROC/AUC, classification metrics and PCA export."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import model as M
from .data import ClipWindow, LabelSeries, VideoSequence, n_windows
from .exceptions import DataError, DimensionError, UndefinedMetricError
from .training import build_target

logger = logging.getLogger(__name__)

__all__ = [
    "ScoreSeries", "RocCurve", "ThresholdMetrics", "PCAResult",
    "score_video", "compute_threshold", "roc_auc", "threshold_metrics", "delta_s",
    "pca_project", "mean_squared_reconstruction_error", "false_positive_rate",
    "minmax_normalize", "evaluate_scores",
]


@dataclass
class ScoreSeries:
    """Per-frame anomaly scores aligned with a video's frames.

    The first ``T`` frames have no prediction; they carry the first computed
    score and are marked in ``backfilled``.
    """

    scores: np.ndarray
    labels: np.ndarray | None = None
    video_id: str = ""
    backfilled: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.backfilled is None:
            self.backfilled = np.zeros(self.scores.shape, dtype=bool)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.scores.shape:
                raise DimensionError(
                    f"{self.video_id}: {self.labels.size} labels for {self.scores.size} scores")

    def __len__(self):
        return self.scores.size

    @property
    def valid(self):
        return ~self.backfilled


def score_video(params: M.ModelParams, config: M.ModelConfig, video, mode="prediction-1",
                batch_size=32, return_features=False) -> ScoreSeries:
    """Mean squared prediction error for every frame with ``T`` predecessors.

    ``video`` is a :class:`VideoSequence`, a ``T x C x H x W`` array, or a
    ``(VideoSequence, LabelSeries)`` pair.
    """
    labels = None
    if isinstance(video, tuple):
        video, lab = video
        labels = lab.labels if isinstance(lab, LabelSeries) else lab
    frames = video.frames if isinstance(video, VideoSequence) else np.asarray(video)
    vid = video.source_id if isinstance(video, VideoSequence) else ""
    t_len = config.n_frames
    total = frames.shape[0]
    if total <= t_len:
        raise DataError(f"video {vid!r} has {total} frames; scoring needs more than {t_len}")
    count = n_windows(total, t_len, 1)
    dtype = params.weights["embed.E"].dtype
    scores = np.empty(count)
    feats = [] if return_features else None
    for s0 in range(0, count, batch_size):
        starts = range(s0, min(s0 + batch_size, count))
        xs, ys = [], []
        for s in starts:
            x, y = build_target(ClipWindow(frames[s:s + t_len], frames[s + t_len], s + t_len), mode, config)
            xs.append(x)
            ys.append(y.reshape((-1,) + y.shape[-2:]))
        x = np.stack(xs).astype(dtype, copy=False)
        pred = M.predict_next_frame(x, params, config)
        err = pred - np.stack(ys)
        scores[s0:s0 + len(starts)] = np.mean(err * err, axis=(1, 2, 3), dtype=np.float64)
        if return_features:
            feats.append(M.extract_features(x, params, config))
    full = np.concatenate([np.full(t_len, scores[0]), scores])
    backfilled = np.zeros(total, dtype=bool)
    backfilled[:t_len] = True
    return ScoreSeries(full, labels, vid, backfilled, np.concatenate(feats) if feats else None)


def compute_threshold(train_errors) -> float:
    """Mean plus population standard deviation of training-set errors."""
    e = np.asarray(train_errors, dtype=np.float64).ravel()
    if e.size < 2:
        raise ValueError("compute_threshold needs at least 2 error values")
    return float(e.mean() + e.std())


def minmax_normalize(scores):
    s = np.asarray(scores, dtype=np.float64)
    span = s.max() - s.min()
    return np.zeros_like(s) if span == 0 else (s - s.min()) / span


# --------------------------------------------------------------------------
# ranking metrics
# --------------------------------------------------------------------------

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def roc_auc(scores, labels):
    """ROC curve and tie-aware AUC (midrank statistic).

    AUC = P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg). The
    curve sweeps every distinct score as a threshold, predicting positive for
    ``score >= threshold``, from (0, 0) to (1, 1).
    """
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.diff(s_sorted) != 0, True]
    tps = np.cumsum(y_sorted)[last_of_group]
    fps = np.cumsum(1 - y_sorted)[last_of_group]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    curve = RocCurve(fpr, tpr, thresholds, float(auc))
    return curve, float(auc)


@dataclass
class ThresholdMetrics:
    recall: float
    precision: float
    f1: float
    oa: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: bool = False

    @property
    def counts(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def threshold_metrics(scores, labels, threshold) -> ThresholdMetrics:
    """Confusion-matrix metrics with ``score > threshold`` declared anomalous.

    When nothing is predicted positive, precision and F1 are 0 and the result
    is flagged ``degenerate``. Recall is 0 when there are no positive labels.
    """
    s, y = _binary(scores, labels)
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    recall = tp / (tp + fn) if tp + fn else 0.0
    degenerate = tp + fp == 0
    precision = 0.0 if degenerate else tp / (tp + fp)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    oa = (tp + tn) / s.size if s.size else 0.0
    return ThresholdMetrics(recall, precision, f1, oa, tp, fp, tn, fn, degenerate)


def delta_s(scores, labels) -> float:
    """Mean anomalous score minus mean normal score."""
    s, y = _binary(scores, labels)
    if y.min() == y.max():
        raise UndefinedMetricError("delta_s needs both normal and anomalous frames")
    return float(s[y == 1].mean() - s[y == 0].mean())


def mean_squared_reconstruction_error(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores")
    return float(s.mean())


def false_positive_rate(scores, labels, threshold) -> float:
    m = threshold_metrics(scores, labels, threshold)
    if m.fp + m.tn == 0:
        raise UndefinedMetricError("false positive rate needs at least one normal frame")
    return m.fp / (m.fp + m.tn)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

@dataclass
class PCAResult:
    components: np.ndarray         # K x k, orthonormal columns
    projected: np.ndarray          # n x k
    explained_variance_ratio: np.ndarray
    mean: np.ndarray

    def inverse(self, projected=None):
        z = self.projected if projected is None else projected
        return z @ self.components.T + self.mean


def pca_project(features, k=3) -> PCAResult:
    """Project centred features onto the top-``k`` covariance eigenvectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be n x K, got {x.shape}")
    n, dim = x.shape
    if k < 1 or k > min(n, dim):
        raise ValueError(f"k={k} exceeds min(n, K) = {min(n, dim)}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order][:, :k]
    # sign convention: largest-magnitude entry of each component is positive
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(k)])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    total = evals.sum()
    ratios = evals[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(evecs, xc @ evecs, ratios, mean)


# --------------------------------------------------------------------------
# report assembly
# --------------------------------------------------------------------------

def _pool(series, normalize):
    scores, labels = [], []
    for s in series:
        if s.labels is None:
            raise DataError(f"video {s.video_id!r} has no labels")
        v = s.valid
        sc = minmax_normalize(s.scores) if normalize else s.scores
        scores.append(sc[v])
        labels.append(s.labels[v])
    return np.concatenate(scores), np.concatenate(labels)


def evaluate_scores(series: list[ScoreSeries], threshold: float, per_video_auc=False, normalize=False) -> dict:
    """Pool test-video scores (backfilled frames excluded) into a metrics dict.

    Single-class pools get ``auc``/``delta_s`` of ``None`` with a reason; MSRE
    and FPR are still reported when defined.
    """
    scores, labels = _pool(series, normalize)
    m = threshold_metrics(scores, labels, threshold)
    report = {
        "auc": None, "recall": m.recall, "precision": m.precision, "f1": m.f1, "oa": m.oa,
        "delta_s": None, "threshold": float(threshold), "counts": m.counts,
        "degenerate": m.degenerate, "msre": mean_squared_reconstruction_error(scores),
        "fpr": float(m.fp / (m.fp + m.tn)) if m.fp + m.tn else None,
    }
    try:
        _, report["auc"] = roc_auc(scores, labels)
        report["delta_s"] = delta_s(scores, labels)
    except UndefinedMetricError as exc:
        report["auc_reason"] = str(exc)
    if per_video_auc:
        rows = []
        for s in series:
            sc = minmax_normalize(s.scores) if normalize else s.scores
            row = {"video_id": s.video_id, "auc": None}
            try:
                row["auc"] = roc_auc(sc[s.valid], s.labels[s.valid])[1]
            except UndefinedMetricError as exc:
                row["reason"] = str(exc)
            rows.append(row)
        report["per_video"] = rows
        defined = [r["auc"] for r in rows if r["auc"] is not None]
        report["mean_per_video_auc"] = float(np.mean(defined)) if defined else None
    return report
