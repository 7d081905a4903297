"""Command-line entry point: ``andt {synth,train,eval,gradcheck}``.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import model as M
from .data import SynthConfig, load_dataset, parse_spans, synth_moving_dot, write_video
from .evaluation import compute_threshold, evaluate_scores, pca_project, roc_auc, score_video
from .exceptions import ANDTError, CheckpointError, ConfigError, DataError, NumericFault
from .numerics import run_op_suite
from .training import Checkpoint, TrainConfig, full_model_gradcheck, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("andt")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

RUN_CONFIG_KEYS = {"model", "train", "data", "max_steps"}
DATA_KEYS = {"scene", "n_jobs"}


class UsageError(ANDTError):
    pass


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

def resolve_run_config(doc: dict) -> dict:
    """Fill defaults and reject unknown keys. Returns a JSON-ready dict."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    data = dict(doc.get("data") or {})
    bad = set(data) - DATA_KEYS
    if bad:
        raise ConfigError(f"unknown data config keys: {sorted(bad)}")
    train_cfg = TrainConfig.from_dict(doc.get("train") or {})
    model_doc = dict(doc.get("model") or {})
    if train_cfg.mode == "reconstruction-6":
        model_doc.setdefault("out_frames", model_doc.get("n_frames", M.ModelConfig.n_frames))
    model_cfg = M.ModelConfig.from_dict(model_doc)
    max_steps = doc.get("max_steps")
    if max_steps is not None and (not isinstance(max_steps, int) or max_steps < 1):
        raise ConfigError("max_steps must be a positive integer or null")
    return {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": {"scene": data.get("scene"), "n_jobs": int(data.get("n_jobs", 1))},
        "max_steps": max_steps,
    }


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def _pick_scene(data_dir: Path, scene):
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    if scene:
        if not (data_dir / scene).is_dir():
            raise UsageError(f"scene {scene!r} not found under {data_dir}")
        return scene
    scenes = sorted(p.name for p in data_dir.iterdir() if p.is_dir())
    if len(scenes) != 1:
        raise UsageError(f"{data_dir} holds scenes {scenes}; set data.scene in the config")
    return scenes[0]


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_scores_csv(path, series):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("frame_index,score,label,backfilled\n")
        labels = series.labels if series.labels is not None else np.full(len(series), -1)
        for i, (s, lab, b) in enumerate(zip(series.scores, labels, series.backfilled)):
            fh.write(f"{i},{s:.10g},{int(lab)},{int(b)}\n")


def render_score_svg(series, threshold=None, width=800, height=240) -> str:
    """Per-frame score curve with anomalous frames shaded."""
    n = len(series)
    s = series.scores
    top = max(float(s.max()), threshold or 0.0) or 1.0
    pad = 30
    pw, ph = width - 2 * pad, height - 2 * pad

    def x(i):
        return pad + pw * (i / max(n - 1, 1))

    def y(v):
        return pad + ph * (1.0 - v / top)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if series.labels is not None:
        lab = series.labels
        i = 0
        while i < n:
            if lab[i] == 1:
                j = i
                while j + 1 < n and lab[j + 1] == 1:
                    j += 1
                x0, x1 = x(i) - pw / max(n - 1, 1) / 2, x(j) + pw / max(n - 1, 1) / 2
                parts.append(f'<rect x="{x0:.2f}" y="{pad}" width="{x1 - x0:.2f}" height="{ph}" '
                             f'fill="#f4b6b6" fill-opacity="0.6"/>')
                i = j + 1
            else:
                i += 1
    pts = " ".join(f"{x(i):.2f},{y(v):.2f}" for i, v in enumerate(s))
    parts.append(f'<polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{pts}"/>')
    if threshold is not None and np.isfinite(threshold):
        parts.append(f'<line x1="{pad}" x2="{pad + pw}" y1="{y(threshold):.2f}" y2="{y(threshold):.2f}" '
                     f'stroke="#444" stroke-dasharray="4 3"/>')
    parts.append(f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{pad - 8}" font-family="sans-serif" font-size="12">'
                 f'{series.video_id}: anomaly score per frame</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    try:
        spans = parse_spans(args.anomaly_spans)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for a, b in spans:
        if not 0 <= a < b <= args.frames:
            raise UsageError(f"anomaly span {a}:{b} does not fit in {args.frames} frames")
    root = Path(args.out) / args.scene
    common = dict(size=args.size, radius=args.radius, velocity=tuple(args.velocity), n_frames=args.frames,
                  channels=args.channels)
    for i in range(args.train_videos):
        seq, _ = synth_moving_dot(SynthConfig(seed=args.seed * 1000 + i, **common))
        write_video(root / "train" / f"video_{i:03d}", seq, fmt=args.format)
    for i in range(args.test_videos):
        seq, labels = synth_moving_dot(SynthConfig(seed=args.seed * 1000 + 500 + i,
                                                   anomaly_spans=tuple(spans), **common))
        write_video(root / "test" / f"video_{i:03d}", seq, labels=labels, fmt=args.format)
    print(f"wrote {args.train_videos} train and {args.test_videos} test videos to {root}")
    return EXIT_OK


def _load_run_config(path):
    if path is None:
        return resolve_run_config({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return resolve_run_config(doc)


def _train_errors(params, cfg, mode, videos):
    errs = [score_video(params, cfg, seq, mode=mode).scores[cfg.n_frames:] for seq in videos
            if len(seq) > cfg.n_frames]
    return np.concatenate(errs)


def cmd_train(args) -> int:
    resolved = _load_run_config(args.config)
    model_cfg = M.ModelConfig.from_dict(resolved["model"])
    train_cfg = TrainConfig.from_dict(resolved["train"])
    data_dir = Path(args.data)
    scene = _pick_scene(data_dir, resolved["data"]["scene"])
    resolved["data"]["scene"] = scene
    pairs = load_dataset(data_dir, scene, "train", size=(model_cfg.height, model_cfg.width),
                         channels=model_cfg.channels, n_jobs=resolved["data"]["n_jobs"])
    videos = [seq for seq, _ in pairs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, state, history = train(videos, model_cfg, train_cfg, max_steps=resolved["max_steps"])
    threshold = compute_threshold(_train_errors(params, model_cfg, train_cfg.mode, videos))
    digest = config_hash(resolved)
    ckpt = Checkpoint(model_cfg, params, state, history, train_cfg,
                      {"threshold": threshold, "config_fingerprint": digest, "scene": scene})
    save_checkpoint(ckpt, out / "checkpoint.andt")
    _write_json(out / "resolved_config.json", {"config": resolved, "sha256_16": digest})
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,wall_time_s\n")
        for i, (loss, wt) in enumerate(zip(history.epoch_loss, history.wall_time)):
            fh.write(f"{i},{loss:.10g},{wt:.3f}\n")
    print(f"trained {len(history.step_loss)} steps; final epoch loss {history.epoch_loss[-1]:.6g}; "
          f"threshold {threshold:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint {args.checkpoint} not found") from exc
    except CheckpointError as exc:
        raise UsageError(f"cannot use checkpoint: {exc}") from exc
    cfg = ckpt.model_config
    trained_mode = ckpt.train_config.mode if ckpt.train_config else "prediction-1"
    mode = args.mode or trained_mode
    if (mode == "reconstruction-6") != (cfg.out_frames > 1):
        raise UsageError(f"checkpoint trained for {trained_mode} cannot be evaluated in mode {mode}")
    data_dir = Path(args.data)
    scene = _pick_scene(data_dir, ckpt.extra.get("scene"))
    size = (cfg.height, cfg.width)
    tests = load_dataset(data_dir, scene, "test", size=size, channels=cfg.channels)
    threshold = ckpt.extra.get("threshold")
    if threshold is None or mode != trained_mode:
        train_pairs = load_dataset(data_dir, scene, "train", size=size, channels=cfg.channels)
        threshold = compute_threshold(_train_errors(ckpt.params, cfg, mode, [s for s, _ in train_pairs]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = []
    for seq, labels in tests:
        s = score_video(ckpt.params, cfg, (seq, labels), mode=mode, return_features=True)
        series.append(s)
        _write_scores_csv(out / f"scores_{s.video_id}.csv", s)
        (out / f"curve_{s.video_id}.svg").write_text(render_score_svg(s, threshold), encoding="utf-8")

    report = evaluate_scores(series, threshold, per_video_auc=args.per_video_auc, normalize=args.normalize)
    report["config_fingerprint"] = ckpt.extra.get("config_fingerprint", cfg.fingerprint())
    report["mode"] = mode
    _write_json(out / "report.json", report)

    with open(out / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("fpr,tpr,threshold\n")
        if report["auc"] is not None:
            pooled = np.concatenate([s.scores[s.valid] for s in series])
            pooled_lab = np.concatenate([s.labels[s.valid] for s in series])
            curve, _ = roc_auc(pooled, pooled_lab)
            for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
                fh.write(f"{f:.10g},{t:.10g},{th:.10g}\n")

    feats = np.concatenate([s.features for s in series])
    labs = np.concatenate([s.labels[s.valid] for s in series])
    idx = np.concatenate([np.nonzero(s.valid)[0] for s in series])
    k = min(3, *feats.shape)
    pcs = np.zeros((feats.shape[0], 3))
    pcs[:, :k] = pca_project(feats, k).projected
    with open(out / "features.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_index", "label"] + [f"p_{j}" for j in range(feats.shape[1])]
                        + ["pc1", "pc2", "pc3"])
        for i, lab, f, pc in zip(idx, labs, feats, pcs):
            writer.writerow([int(i), int(lab)] + [f"{v:.10g}" for v in f] + [f"{v:.10g}" for v in pc])

    auc = report["auc"]
    print(f"AUC {'n/a (' + report.get('auc_reason', '') + ')' if auc is None else f'{auc:.4f}'}; "
          f"F1 {report['f1']:.4f}; OA {report['oa']:.4f}; threshold {threshold:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    tol = args.tolerance
    reports = run_op_suite(tolerance=tol)
    model_cfg = M.tiny_config()
    groups, full = full_model_gradcheck(model_cfg, tolerance=tol * 10)
    print(f"{'op':<24s} {'max_rel_err':>12s} {'tol':>8s}  result")
    failing = []
    for rep in reports + [full]:
        print(f"{rep.op_name:<24s} {rep.max_rel_error:12.3e} {rep.tolerance:8.0e}  {'PASS' if rep.passed else 'FAIL'}")
        if not rep.passed:
            failing.append(rep.op_name)
    worst = max(groups, key=lambda g: g[1])
    print(f"full model: {len(groups)} weight groups, worst {worst[0]} ({worst[1]:.3e}); "
          f"{time.perf_counter() - t0:.1f}s")
    if failing:
        print("FAILED: " + ", ".join(failing))
        return EXIT_CHECK
    print("all gradient checks passed")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="andt", description="Transformer video anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic moving-dot dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--anomaly-spans", default="80:120", help="half-open spans, e.g. '40:60,120:140'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--velocity", type=float, nargs=2, default=(2.0, 1.0))
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--train-videos", type=int, default=4)
    p.add_argument("--test-videos", type=int, default=2)
    p.add_argument("--scene", default="synthetic")
    p.add_argument("--format", choices=("raw", "png"), default="raw")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the train split of a dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the test split and write metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("prediction-1", "reconstruction-1", "reconstruction-6"))
    p.add_argument("--per-video-auc", action="store_true")
    p.add_argument("--normalize", action="store_true", help="min-max normalise scores per video")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny model")
    p.add_argument("--tiny-config", action="store_true", default=True,
                   help="check the full model on the tiny geometry (always on)")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="relative tolerance for ops; the full model uses 10x this")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError) as exc:
        print(f"andt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"andt {args.command}: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
