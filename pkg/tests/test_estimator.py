import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from siagcn import SiaPoseRefiner
from siagcn.errors import ShapeError
from siagcn.graph import build_chain
from siagcn.model import decode_argmax
from siagcn.synth import CorruptionConfig, SynthConfig, generate_split


@pytest.fixture(scope="module")
def data():
    synth = SynthConfig(seed=21, n_train=16, n_val=4, n_test=6)
    return {s: generate_split(synth, CorruptionConfig(), s) for s in ("train", "val", "test")}


def fast(**kw):
    return SiaPoseRefiner(n_heads=2, n_layers=2, kernel_size=3, epochs=1, batch_size=8, **kw)


def test_params_and_clone():
    est = fast(lr=3e-3)
    params = est.get_params()
    assert params["lr"] == 3e-3 and params["n_heads"] == 2
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")
    est.set_params(epochs=2)
    assert est.epochs == 2


def test_fit_transform_predict_score(data):
    tr, va, te = data["train"], data["val"], data["test"]
    est = fast().fit(tr.inputs, tr.keypoints, va.inputs, va.keypoints)
    maps = est.transform(te.inputs)
    assert maps.shape == te.inputs.shape
    kp = est.predict(te.inputs)
    assert kp.shape == (6, 21, 2)
    score = est.score(te.inputs, te.keypoints)
    assert 0 <= score <= 1
    assert est.history_[0]["epoch"] == -1
    np.testing.assert_array_equal(est.fit_transform(tr.inputs, tr.keypoints), fast().fit(tr.inputs, tr.keypoints).transform(tr.inputs))


def test_fit_is_deterministic(data):
    tr = data["train"]
    a = fast(random_state=3).fit(tr.inputs, tr.keypoints).transform(tr.inputs[:2])
    b = fast(random_state=3).fit(tr.inputs, tr.keypoints).transform(tr.inputs[:2])
    assert a.tobytes() == b.tobytes()


def test_untrained_refiner_is_near_identity(data):
    te = data["test"]
    est = SiaPoseRefiner(max_steps=0, epochs=1, init_noise=0.0).fit(te.inputs, te.keypoints)
    np.testing.assert_allclose(est.transform(te.inputs), te.inputs, atol=1e-12)
    np.testing.assert_array_equal(est.predict(te.inputs), decode_argmax(te.inputs))


def test_validation_errors(data):
    tr = data["train"]
    with pytest.raises(NotFittedError):
        fast().transform(tr.inputs)
    with pytest.raises(ShapeError):
        fast().fit(tr.inputs[:, :20], tr.keypoints[:, :20])
    with pytest.raises(ShapeError):
        fast().fit(tr.inputs, tr.keypoints[:, :, :1])
    with pytest.raises(ShapeError):
        fast().fit(tr.inputs[0], tr.keypoints[0])
    with pytest.raises(ValueError):
        bad = tr.inputs.copy()
        bad[0, 0, 0, 0] = np.nan
        fast().fit(bad, tr.keypoints)
    est = fast().fit(tr.inputs, tr.keypoints)
    with pytest.raises(ShapeError):
        est.transform(tr.inputs[:, :, :16, :16])


def test_custom_graph():
    rng = np.random.default_rng(0)
    X = rng.random((4, 4, 8, 8))
    y = rng.integers(0, 8, (4, 4, 2)).astype(float)
    est = fast(graph=build_chain(4)).fit(X, y)
    assert est.predict(X).shape == (4, 4, 2)
