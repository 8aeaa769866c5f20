import numpy as np
import pytest

from mfnet import ndgrad as nd
from mfnet.gradcheck import GRAD_CASES, LOSS_CASES, OP_CASES, TOLERANCE, run_grad_checks


def test_registry_covers_every_differentiable_op():
    # each core op has a case; the fused BCE kernels are reached through the loss cases
    covered = set(OP_CASES) - {"conv3x3_stride2"}
    assert covered == set(nd.CORE_OPS)
    assert {"classification_loss", "filter_loss", "multi_guidance_loss", "self_supervision_loss",
            "total_loss"} <= set(LOSS_CASES)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_case_builds_scalar_float64(name):
    fn, wrt = GRAD_CASES[name](np.random.default_rng(0))
    out = fn()
    assert np.ndim(out.value) == 0
    assert all(t.value.dtype == np.float64 and t.requires_grad for t in wrt)


def test_report_shape_and_determinism():
    a = run_grad_checks(seed=3, instances=2, names=["relu", "filter_loss"])
    b = run_grad_checks(seed=3, instances=2, names=["relu", "filter_loss"])
    assert a == b
    assert set(a) == {"relu", "filter_loss"}
    for entry in a.values():
        assert entry["instances"] == 2 and entry["passed"] == (entry["max_rel_err"] <= TOLERANCE)


def test_detects_wrong_backward(monkeypatch):
    # negative control: a square op whose backward is off by a factor 1.01 must fail
    fwd, bwd = nd.OPS["square"]
    monkeypatch.setitem(nd.OPS, "square", (fwd, lambda g, c, v: [1.01 * d for d in bwd(g, c, v)]))
    report = run_grad_checks(seed=0, instances=2, names=["square"])
    assert not report["square"]["passed"]
    assert report["square"]["max_rel_err"] > 1e-3


def test_relative_error_definition():
    assert nd.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert nd.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
