import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sparsecycle.data import generate_synthetic_dataset, make_psf, stack_pairs
from sparsecycle.estimator import MotionBlur, SparseCycleDeblurrer
from sparsecycle.validation import check_images, check_pair, check_positive_int


@pytest.fixture(scope="module")
def data():
    return stack_pairs(generate_synthetic_dataset(3, 32, make_psf(5, 0), seed=0))


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return SparseCycleDeblurrer(base_channels=4, n_res_blocks=1, epochs=2).fit(X, y)


def test_get_params_and_clone():
    est = SparseCycleDeblurrer(base_channels=4, kwinner=False)
    params = est.get_params()
    assert params["base_channels"] == 4 and params["kwinner"] is False
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(epochs=3).epochs == 3


def test_fit_predict_score(fitted, data):
    X, y = data
    out = fitted.predict(X)
    assert out.shape == X.shape and out.dtype == np.float32
    assert np.abs(out).max() <= 1.0
    assert len(fitted.history_) == 2 * len(X)
    assert np.isfinite(fitted.score(X, y))
    assert np.allclose(fitted.transform(X[0]), out[:1], atol=1e-5)


def test_refit_is_deterministic(fitted, data):
    X, y = data
    again = clone(fitted).fit(X, y)
    assert again.history_ == fitted.history_
    assert np.array_equal(again.predict(X), fitted.predict(X))


def test_save_and_reload(tmp_path, fitted, data):
    X, _ = data
    fitted.save(tmp_path / "m.ckpt")
    loaded = SparseCycleDeblurrer.from_checkpoint(tmp_path / "m.ckpt")
    assert loaded.base_channels == 4 and loaded.image_shape_ == (3, 32, 32)
    assert np.array_equal(loaded.predict(X), fitted.predict(X))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SparseCycleDeblurrer().predict(np.zeros((1, 3, 32, 32)))
    with pytest.raises(NotFittedError):
        MotionBlur().transform(np.zeros((1, 1, 8, 8)))


def test_fit_validation_errors(data):
    X, y = data
    est = SparseCycleDeblurrer(epochs=1)
    with pytest.raises(ValueError, match="shapes differ"):
        est.fit(X, y[:2])
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        est.fit(X * 3, y)
    with pytest.raises(ValueError, match="epochs"):
        SparseCycleDeblurrer(epochs=0).fit(X, y)
    with pytest.raises(ValueError, match="channels"):
        SparseCycleDeblurrer(epochs=1, base_channels=4, n_res_blocks=1).fit(X, y).predict(X[:, :1])


def test_check_images():
    assert check_images(np.zeros((3, 8, 8))).shape == (1, 3, 8, 8)
    with pytest.raises(ValueError, match="empty"):
        check_images(np.zeros((0, 3, 8, 8)))
    with pytest.raises(ValueError, match="divisible by 4"):
        check_images(np.zeros((1, 3, 6, 8)))
    with pytest.raises(ValueError, match="NaN"):
        check_images(np.full((1, 1, 4, 4), np.nan))
    with pytest.raises(ValueError, match="shape"):
        check_images(np.zeros((4, 4)))
    with pytest.raises(TypeError):
        check_images(object())
    assert check_images(np.full((1, 1, 5, 5), 7.0), multiple_of=1, value_range=False).dtype == np.float32
    X, y = check_pair(np.zeros((2, 1, 4, 4)), np.ones((2, 1, 4, 4)))
    assert X.shape == y.shape
    for bad in (0, -1, 1.5, True, "3"):
        with pytest.raises(ValueError):
            check_positive_int(bad, "n")


def test_motion_blur_transformer(rng):
    X = rng.uniform(-1, 1, (2, 3, 12, 12)).astype(np.float32)
    blur = MotionBlur(length=1).fit(X)
    assert np.array_equal(blur.transform(X), X)
    out = MotionBlur(length=5, angle=90).fit_transform(X)
    assert out.shape == X.shape and not np.array_equal(out, X)
    assert clone(MotionBlur(length=3)).get_params()["length"] == 3
