import struct

import numpy as np
import pytest

from andt import model as M
from andt.data import ClipWindow, VideoSequence, synth_moving_dot
from andt.exceptions import (
    CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError,
    ConfigError, DataError,
)
from andt.training import (
    AdamState, Checkpoint, TrainConfig, adam_update, build_target, fit, full_model_gradcheck,
    load_checkpoint, prediction_loss, prediction_loss_grad, save_checkpoint, train,
)


# -- loss ----------------------------------------------------------------------

def test_loss_examples():
    x = np.random.default_rng(0).random((3, 4))
    assert prediction_loss(x, x) == 0.0
    assert prediction_loss(np.ones((2, 5)), np.zeros((2, 5))) == 1.0
    assert prediction_loss(np.array([0.0, 1.0]), np.zeros(2)) == 0.5


def test_loss_grad_matches_finite_difference(rng):
    p, t = rng.random(6), rng.random(6)
    _, g = prediction_loss_grad(p, t)
    h = 1e-6
    num = [(prediction_loss(p + h * e, t) - prediction_loss(p - h * e, t)) / (2 * h) for e in np.eye(6)]
    np.testing.assert_allclose(g, num, rtol=1e-6)


# -- targets -------------------------------------------------------------------

def _window(t_len=6, seed=0):
    frames = np.random.default_rng(seed).random((t_len + 1, 1, 4, 4))
    return ClipWindow(frames[:t_len], frames[t_len], t_len), frames


def test_build_target_modes():
    w, frames = _window()
    x, y = build_target(w, "prediction-1")
    np.testing.assert_array_equal(x, frames[:6])
    np.testing.assert_array_equal(y, frames[6])
    x, y = build_target(w, "reconstruction-1")
    np.testing.assert_array_equal(y, frames[6])
    for f in x:
        np.testing.assert_array_equal(f, y)
    x, y = build_target(w, "reconstruction-6")
    assert x.shape == (6, 1, 4, 4) and y.shape == (6, 4, 4)
    np.testing.assert_array_equal(x, frames[1:7])


def test_build_target_checks_model_config():
    w, _ = _window(t_len=2)
    with pytest.raises(ConfigError):
        build_target(w, "reconstruction-6", M.tiny_config())
    with pytest.raises(ConfigError):
        build_target(w, "unknown-mode")
    build_target(w, "reconstruction-6", M.tiny_config(out_frames=2))


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"a": np.array([1.0, -2.0])}
    new, state = adam_update(p, {"a": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["a"], p["a"])
    assert state.step == 1


@pytest.mark.parametrize("g", [0.05, -3.0, 250.0])
def test_adam_first_step_is_lr_times_sign(g):
    lr = 1e-3
    new, _ = adam_update({"a": np.array(0.5)}, {"a": np.array(g)}, AdamState(), lr=lr)
    delta = float(new["a"]) - 0.5
    assert abs(abs(delta) - lr) < 1e-9
    assert np.sign(delta) == -np.sign(g)


@pytest.mark.parametrize("g", [1e-9, -1e-6, 1e-3])
def test_adam_first_step_closed_form(g):
    # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
    lr, eps = 1e-3, 1e-8
    new, _ = adam_update({"a": np.array(0.5)}, {"a": np.array(g)}, AdamState(), lr=lr, eps=eps)
    assert float(new["a"]) - 0.5 == pytest.approx(-lr * g / (abs(g) + eps), rel=1e-9)


def test_adam_small_lr_bound_and_purity(rng):
    p = {"a": rng.normal(size=5)}
    g = {"a": rng.normal(size=5)}
    before = p["a"].copy()
    for lr in (1e-3, 1e-9, 1e-15):
        new, _ = adam_update(p, g, AdamState(), lr=lr)
        assert np.abs(new["a"] - before).max() <= lr * (1 + 1e-6)
    np.testing.assert_array_equal(p["a"], before)
    a, sa = adam_update(p, g, AdamState(), lr=0.01)
    b, sb = adam_update(p, g, AdamState(), lr=0.01)
    assert a["a"].tobytes() == b["a"].tobytes() and sa.m["a"].tobytes() == sb.m["a"].tobytes()


# -- training loop ----------------------------------------------------------------

def _one_batch_video():
    # 6 frames with T=2 yield exactly four windows: one batch of 4
    seq, _ = synth_moving_dot(size=8, radius=2.0, n_frames=6, seed=1, velocity=(1.0, 1.0))
    return seq


def test_overfit_single_batch():
    cfg = M.tiny_config(fc_hidden=32, decoder_channels=(16, 16, 16))
    tc = TrainConfig(learning_rate=5e-3, batch_size=4, epochs=500)
    _, hist = fit([_one_batch_video()], cfg, tc)
    assert len(hist.step_loss) == 500
    assert min(hist.step_loss) < 1e-3
    assert hist.step_loss[-1] < 1e-3


def test_epoch_loss_non_increasing_on_repeated_batch():
    _, hist = fit([_one_batch_video()], M.tiny_config(), TrainConfig(learning_rate=1e-3, batch_size=4, epochs=200))
    e = hist.epoch_loss
    assert e[-1] < e[0]
    for a, b in zip(e, e[1:]):
        assert b <= a * 1.01


def test_training_is_deterministic():
    seqs = [synth_moving_dot(size=8, n_frames=9, radius=2.0, seed=s)[0] for s in range(2)]
    tc = TrainConfig(learning_rate=1e-3, batch_size=3, epochs=2, seed=5)
    p1, h1 = fit(seqs, M.tiny_config(), tc)
    p2, h2 = fit(seqs, M.tiny_config(), tc)
    assert h1.step_loss == h2.step_loss
    for k in p1.weights:
        assert p1.weights[k].tobytes() == p2.weights[k].tobytes()
    for k in p1.buffers:
        assert p1.buffers[k].tobytes() == p2.buffers[k].tobytes()


def test_empty_dataset_errors():
    with pytest.raises(DataError):
        fit([], M.tiny_config(), TrainConfig())
    short = VideoSequence(np.zeros((2, 1, 8, 8)))
    with pytest.raises(DataError):
        fit([short], M.tiny_config(), TrainConfig())


def test_mode_and_output_width_must_agree():
    seq = _one_batch_video()
    with pytest.raises(ConfigError):
        fit([seq], M.tiny_config(), TrainConfig(mode="reconstruction-6"))
    params, hist = fit([seq], M.tiny_config(out_frames=2), TrainConfig(mode="reconstruction-6", batch_size=4))
    assert params.weights["dec.out.w"].shape[0] == 2
    assert np.isfinite(hist.epoch_loss).all()


def test_max_steps_stops_early():
    seqs = [synth_moving_dot(size=8, n_frames=12, radius=2.0, seed=0)[0]]
    _, _, hist = train(seqs, M.tiny_config(), TrainConfig(batch_size=2, epochs=5), max_steps=3)
    assert len(hist.step_loss) == 3


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="prediction-2")
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "prediction-1", "momentum": 0.9})


def test_full_model_gradient_matches_finite_differences():
    per_group, report = full_model_gradcheck(tolerance=1e-3)
    assert report.passed, str(report)
    names = {n for n, _ in per_group}
    assert names == set(M.param_shapes(M.tiny_config())[0])


# -- checkpoints -------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    seqs = [synth_moving_dot(size=8, n_frames=8, radius=2.0, seed=s)[0] for s in range(2)]
    cfg = M.tiny_config()
    tc = TrainConfig(batch_size=4, epochs=2)
    params, state, hist = train(seqs, cfg, tc)
    ckpt = Checkpoint(cfg, params, state, hist, tc, {"threshold": 0.125})
    path = tmp_path / "model.andt"
    save_checkpoint(ckpt, path)
    return ckpt, path


def test_checkpoint_round_trip(trained):
    ckpt, path = trained
    back = load_checkpoint(path)
    assert back.model_config == ckpt.model_config
    assert back.train_config == ckpt.train_config
    assert back.extra == {"threshold": 0.125}
    assert back.opt_state.step == ckpt.opt_state.step
    assert back.history.epoch_loss == ckpt.history.epoch_loss
    for group in ("weights", "buffers"):
        a, b = getattr(ckpt.params, group), getattr(back.params, group)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()
    for k in ckpt.opt_state.m:
        assert ckpt.opt_state.m[k].tobytes() == back.opt_state.m[k].tobytes()
        assert ckpt.opt_state.v[k].tobytes() == back.opt_state.v[k].tobytes()


def test_checkpoint_save_is_byte_stable(trained, tmp_path):
    ckpt, path = trained
    save_checkpoint(load_checkpoint(path), tmp_path / "again.andt")
    assert path.read_bytes() == (tmp_path / "again.andt").read_bytes()


def test_checkpoint_forward_bit_identical_after_reload(trained):
    ckpt, path = trained
    back = load_checkpoint(path)
    clips = np.random.default_rng(9).random((100, 2, 1, 8, 8))
    a = M.predict_next_frame(clips, ckpt.params, ckpt.model_config)
    b = M.predict_next_frame(clips, back.params, back.model_config)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("where", [0.3, 0.6, 0.95])
def test_corrupted_byte_fails_checksum(trained, tmp_path, where):
    _, path = trained
    data = bytearray(path.read_bytes())
    i = 12 + int(where * (len(data) - 16))
    data[i] ^= 0x5A
    bad = tmp_path / "bad.andt"
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(bad)


def test_version_two_rejected(trained, tmp_path):
    ckpt, _ = trained
    path = tmp_path / "v2.andt"
    save_checkpoint(ckpt, path, version=2)
    assert struct.unpack_from("<I", path.read_bytes(), 4)[0] == 2
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [6, 40, -100, -1])
def test_truncated_file(trained, tmp_path, keep):
    _, path = trained
    data = path.read_bytes()
    cut = tmp_path / "cut.andt"
    cut.write_bytes(data[:keep])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(cut)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.andt"
    path.write_bytes(b"PK\x03\x04" + bytes(40))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
