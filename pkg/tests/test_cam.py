import numpy as np
import pytest

from mfnet.cam import compute_cam, multi_inference_cam
from mfnet.core import ConfigError, NumericError, resize_bilinear
from mfnet.nets import NetConfig, encoder_forward, init_classifier, to_nchw
from mfnet.ndgrad import Tensor


@pytest.fixture(scope="module")
def clf():
    return init_classifier(4, seed=0)


@pytest.fixture
def image(rng):
    return rng.uniform(size=(64, 64, 3))


def _set_head(p, w, b):
    p = dict(p)
    p["head.w"] = Tensor(np.asarray(w, np.float32).reshape(len(b), -1, 1, 1))
    p["head.b"] = Tensor(np.asarray(b, np.float32))
    return p


def test_non_positive_channels_give_zero_map(clf, image):
    p = _set_head(clf, np.zeros((4, 64)), [-1.0] * 4)
    res = compute_cam(p, image)
    assert np.array_equal(res.map, np.zeros((64, 64)))
    assert res.per_class_maps.shape == (4, 64, 64)


def test_single_class_equals_its_map(rng, image):
    p = init_classifier(1, seed=2)
    res = compute_cam(p, image)
    assert np.allclose(res.map, res.per_class_maps[0], atol=1e-12)


def test_two_class_direct_evaluation(image):
    cfg = NetConfig(widths=(4, 4, 4, 4, 1))
    p = _set_head(init_classifier(2, seed=4, cfg=cfg), [[2.0], [-1.5]], [0.1, 0.3])
    f5 = encoder_forward(p, Tensor(to_nchw(image))).f5.value[0, 0]
    gap = float(f5.astype(np.float64).mean())
    total = np.zeros((64, 64))
    for wi, bi in [(2.0, 0.1), (-1.5, 0.3)]:
        # head activations in the network's float32, everything after in float64
        raw = (np.float32(wi) * f5 + np.float32(bi)).astype(np.float64)
        act = resize_bilinear(np.maximum(raw, 0), 64, 64)
        span = act.max() - act.min()
        norm = (act - act.min()) / span if span > 0 else np.zeros_like(act)
        total += norm / (1 + np.exp(-(wi * gap + bi)))
    expect = (total - total.min()) / (total.max() - total.min())
    assert np.abs(compute_cam(p, image).map - expect).max() <= 1e-6


def test_signed_weights_flag(clf, image):
    a = compute_cam(clf, image).map
    b = compute_cam(clf, image, signed_weights=True).map
    assert a.shape == b.shape and not np.allclose(a, b)


def test_class_permutation_invariance(clf, image):
    perm = [2, 0, 3, 1]
    p = _set_head(clf, clf["head.w"].value[perm].reshape(4, -1), clf["head.b"].value[perm])
    assert np.allclose(compute_cam(p, image).map, compute_cam(clf, image).map, atol=1e-12)


def test_nan_params_raise(clf, image):
    p = dict(clf)
    p["head.b"] = Tensor(np.array([np.nan, 0, 0, 0], np.float32))
    with pytest.raises(NumericError):
        compute_cam(p, image)


def test_unit_scales_without_flip_equal_single_cam(clf, image):
    single = compute_cam(clf, image).map
    multi = multi_inference_cam(clf, image, scales=(1.0,) * 4, flip=False)
    assert np.allclose(multi, single, atol=1e-12)


def test_mean_within_member_envelope(clf, image):
    out, members, mean = multi_inference_cam(clf, image, scales=(0.5, 1.0, 1.5, 2.0),
                                             return_members=True)
    assert members.shape == (8, 64, 64)
    assert np.all(mean >= members.min(0) - 1e-12) and np.all(mean <= members.max(0) + 1e-12)
    assert out.min() >= 0 and out.max() <= 1


def test_flip_equivariance(clf, image):
    scales = (0.5, 1.0, 1.5, 2.0)
    a = multi_inference_cam(clf, image, scales=scales)
    b = multi_inference_cam(clf, image[:, ::-1].copy(), scales=scales)
    assert np.allclose(b, a[:, ::-1], rtol=0, atol=1e-12)


def test_deterministic(clf, image):
    assert np.array_equal(multi_inference_cam(clf, image, scales=(1.0, 2.0)),
                          multi_inference_cam(clf, image, scales=(1.0, 2.0)))


@pytest.mark.parametrize("scales", [(0.2, 1.0), (-1.0,), (0.0, 1.0)])
def test_bad_scales(clf, image, scales):
    with pytest.raises(ConfigError):
        multi_inference_cam(clf, image, scales=scales)
