import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from andt import ANDTDetector
from andt.data import synth_moving_dot
from andt.exceptions import DataError

TINY = dict(n_frames=2, frame_size=8, channels=1, tubelet_t=1, patch_size=4, embed_dim=8, n_layers=1,
            n_heads=2, mlp_size=16, fc_hidden=16, decoder_base=2, decoder_channels=(4, 4, 3),
            learning_rate=1e-2, batch_size=4, epochs=2)


@pytest.fixture(scope="module")
def videos():
    train = [synth_moving_dot(size=8, radius=2.0, n_frames=12, seed=s)[0].frames for s in range(2)]
    test, labels = synth_moving_dot(size=8, radius=2.0, n_frames=12, seed=9, anomaly_spans=((5, 9),))
    return train, test.frames, labels.labels


@pytest.fixture(scope="module")
def fitted(videos):
    return ANDTDetector(**TINY).fit(videos[0])


def test_params_and_clone():
    est = ANDTDetector(**TINY)
    assert est.get_params()["embed_dim"] == 8
    other = clone(est).set_params(epochs=5)
    assert other.epochs == 5 and est.epochs == 2


def test_default_estimator_geometry():
    p = ANDTDetector().get_params()
    assert (p["n_frames"], p["frame_size"], p["patch_size"], p["n_layers"], p["n_heads"], p["mlp_size"]) == \
        (6, 256, 16, 2, 6, 4096)


def test_unfitted_raises(videos):
    with pytest.raises(NotFittedError):
        ANDTDetector(**TINY).predict(videos[1])


def test_fit_predict_transform(fitted, videos):
    _, test, labels = videos
    scores = fitted.score_samples(test)
    assert scores.shape == (12,)
    pred = fitted.predict(test)
    np.testing.assert_array_equal(pred, (scores > fitted.threshold_).astype(int))
    np.testing.assert_allclose(fitted.decision_function(test), scores - fitted.threshold_)
    assert fitted.transform(test).shape == (10, 8)
    assert isinstance(fitted.predict([test, test]), list)
    assert 0.0 <= fitted.score(test, labels) <= 1.0
    assert np.isfinite(fitted.threshold_)


def test_fit_is_reproducible(videos, fitted):
    again = ANDTDetector(**TINY).fit(videos[0])
    assert again.threshold_ == fitted.threshold_
    np.testing.assert_array_equal(again.score_samples(videos[1]), fitted.score_samples(videos[1]))


def test_checkpoint_round_trip(fitted, videos, tmp_path):
    fitted.save(tmp_path / "det.andt")
    back = ANDTDetector.from_checkpoint(tmp_path / "det.andt")
    assert back.threshold_ == fitted.threshold_
    assert back.get_params() == {**fitted.get_params(), "max_steps": None}
    np.testing.assert_array_equal(back.score_samples(videos[1]), fitted.score_samples(videos[1]))


@pytest.mark.parametrize("bad", [np.full((5, 1, 8, 8), 2.0), np.zeros((5, 3, 8, 8)), np.zeros((5, 1, 6, 6)),
                                 np.zeros((5, 8))])
def test_input_validation(fitted, bad):
    with pytest.raises(DataError):
        fitted.predict(bad)


def test_three_dim_input_is_single_channel(fitted, videos):
    test = videos[1]
    np.testing.assert_array_equal(fitted.score_samples(test[:, 0]), fitted.score_samples(test))
