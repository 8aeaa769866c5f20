"""Finite-difference gradient checks for every differentiable op and loss.

Each entry of ``GRAD_CASES`` builds one random float64 instance as
``(fn, wrt)``: a closure returning a scalar Tensor and the leaves to check.
Ops with non-scalar output are reduced by ``sum((out + r)^2)`` for a fixed
random ``r``, which keeps linear ops exactly quadratic (central differences
are then exact up to rounding).
"""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .losses import (classification_loss, filter_loss, multi_guidance_loss,
                     self_supervision_loss, total_loss)
from .ndgrad import Tensor

STEP = 1e-3
TOLERANCE = 1e-6


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, gap=0.05):
    """Normal samples pushed at least ``gap`` from the ReLU kink."""
    v = rng.normal(size=shape)
    return Tensor(np.sign(v) * (np.abs(v) + gap), requires_grad=True)


def _nchw(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 6)),
            int(rng.integers(2, 6)))


def _fixed_reduce(rng, build, leaves):
    out = build()
    offset = Tensor(rng.normal(size=out.shape))
    return (lambda: nd.total(nd.square(nd.add(build(), offset)))), leaves


def _case_conv3x3(rng, stride=1):
    n, c, h, w = _nchw(rng)
    k = int(rng.integers(1, 4))
    x, wt, b = _leaf(rng, (n, c, h, w)), _leaf(rng, (k, c, 3, 3)), _leaf(rng, (k,))
    return _fixed_reduce(rng, lambda: nd.conv3x3(x, wt, b, stride=stride), [x, wt, b])


def _case_conv1x1(rng):
    n, c, h, w = _nchw(rng)
    k = int(rng.integers(1, 4))
    x, wt, b = _leaf(rng, (n, c, h, w)), _leaf(rng, (k, c, 1, 1)), _leaf(rng, (k,))
    return _fixed_reduce(rng, lambda: nd.conv1x1(x, wt, b), [x, wt, b])


def _case_relu(rng):
    x = _away_from_zero(rng, _nchw(rng))
    return _fixed_reduce(rng, lambda: nd.relu(x), [x])


def _case_sigmoid(rng):
    x = _leaf(rng, _nchw(rng), scale=2.0)
    return _fixed_reduce(rng, lambda: nd.sigmoid(x), [x])


def _case_gap(rng):
    x = _leaf(rng, _nchw(rng))
    return _fixed_reduce(rng, lambda: nd.gap(x), [x])


def _case_upsample(rng):
    n, c, h, w = _nchw(rng)
    x = _leaf(rng, (n, c, h, w))
    size = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    return _fixed_reduce(rng, lambda: nd.upsample(x, size), [x])


def _case_concat(rng):
    n, c, h, w = _nchw(rng)
    a, b = _leaf(rng, (n, c, h, w)), _leaf(rng, (n, int(rng.integers(1, 4)), h, w))
    return _fixed_reduce(rng, lambda: nd.concat(a, b), [a, b])


def _case_binary(op):
    def case(rng):
        shape = _nchw(rng)
        a, b = _leaf(rng, shape), _leaf(rng, shape)
        return _fixed_reduce(rng, lambda: op(a, b), [a, b])
    return case


def _case_mul_scalar(rng):
    x = _leaf(rng, _nchw(rng))
    k = float(rng.normal())
    return _fixed_reduce(rng, lambda: nd.mul_scalar(x, k), [x])


def _case_square(rng):
    x = _leaf(rng, _nchw(rng))
    return (lambda: nd.total(nd.square(x))), [x]


def _case_sum(rng):
    x = _leaf(rng, _nchw(rng))
    return (lambda: nd.square(nd.total(x))), [x]


def _case_mean(rng):
    x = _leaf(rng, _nchw(rng))
    return (lambda: nd.square(nd.mean(x))), [x]


# losses ----------------------------------------------------------------------

def _map_shape(rng):
    return (int(rng.integers(1, 3)), 1, int(rng.integers(2, 7)), int(rng.integers(2, 7)))


def _case_classification(rng):
    c = int(rng.integers(1, 6))
    n = int(rng.integers(1, 3))
    s = _leaf(rng, (n, c, 1, 1), scale=2.0)
    y = rng.integers(0, 2, size=(n, c)).astype(np.float64)
    return (lambda: classification_loss(s, y)), [s]


def _case_filter(rng):
    """Filter loss through the sigmoid head it always sits behind."""
    z = _leaf(rng, _map_shape(rng), scale=2.0)
    y = rng.integers(0, 2, size=z.shape).astype(np.float64)
    return (lambda: filter_loss(nd.sigmoid(z), y)), [z]


def _case_filter_prob(rng):
    """Filter loss directly in probability space, p on the label's side (|p - y| <= 0.35)."""
    shape = _map_shape(rng)
    y = rng.integers(0, 2, size=shape).astype(np.float64)
    q = rng.uniform(0.65, 0.95, size=shape)
    p = Tensor(np.where(y == 1, q, 1 - q), requires_grad=True)
    return (lambda: filter_loss(p, y)), [p]


def _case_guidance(rng):
    z = _leaf(rng, _map_shape(rng), scale=2.0)
    ys = rng.uniform(0, 1, size=z.shape)
    return (lambda: multi_guidance_loss(nd.sigmoid(z), ys)), [z]


def _case_self_supervision(rng, mode="similarity"):
    shape = _map_shape(rng)
    a = Tensor(rng.uniform(0, 1, size=shape), requires_grad=True)
    b = Tensor(rng.uniform(0, 1, size=shape), requires_grad=True)
    return (lambda: self_supervision_loss(a, b, mode)), [a, b]


def _case_total(rng):
    shape = _map_shape(rng)
    z1, z2, zs = (_leaf(rng, shape, scale=2.0) for _ in range(3))
    y1 = rng.integers(0, 2, size=shape).astype(np.float64)
    y2 = rng.integers(0, 2, size=shape).astype(np.float64)
    ys = rng.uniform(0, 1, size=shape)
    delta = float(rng.choice([-2.0, 0.0, 2.0, 5.0]))

    def fn():
        p1, p2, ps = nd.sigmoid(z1), nd.sigmoid(z2), nd.sigmoid(zs)
        return total_loss(filter_loss(p1, y1), filter_loss(p2, y2), multi_guidance_loss(ps, ys),
                          self_supervision_loss(p1, p2), delta)
    return fn, [z1, z2, zs]


OP_CASES = {
    "conv3x3": _case_conv3x3,
    "conv3x3_stride2": lambda rng: _case_conv3x3(rng, stride=2),
    "conv1x1": _case_conv1x1,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "gap": _case_gap,
    "upsample_bilinear": _case_upsample,
    "concat_channels": _case_concat,
    "add": _case_binary(nd.add),
    "sub": _case_binary(nd.sub),
    "mul_scalar": _case_mul_scalar,
    "square": _case_square,
    "sum": _case_sum,
    "mean": _case_mean,
}

LOSS_CASES = {
    "classification_loss": _case_classification,
    "filter_loss": _case_filter,
    "filter_loss_prob": _case_filter_prob,
    "multi_guidance_loss": _case_guidance,
    "self_supervision_loss": _case_self_supervision,
    "self_supervision_loss_literal": lambda rng: _case_self_supervision(rng, "literal"),
    "total_loss": _case_total,
}

GRAD_CASES = {**OP_CASES, **LOSS_CASES}


def run_grad_checks(seed: int = 0, instances: int = 20, h: float = STEP, names=None) -> dict:
    """``{name: {"instances", "max_rel_err", "passed"}}`` over fresh random instances."""
    report = {}
    for name in names or GRAD_CASES:
        rng = np.random.default_rng([seed, sorted(GRAD_CASES).index(name)])
        worst = 0.0
        for _ in range(instances):
            fn, wrt = GRAD_CASES[name](rng)
            worst = max(worst, nd.check_gradients(fn, wrt, h))
        report[name] = {"instances": instances, "max_rel_err": worst, "passed": worst <= TOLERANCE}
    return report
