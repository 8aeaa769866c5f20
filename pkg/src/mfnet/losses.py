"""Training losses for the classifier and the multi-filter network.

Every loss returns a scalar :class:`~mfnet.ndgrad.Tensor` that can be passed to
``ndgrad.backward``. Targets never receive gradients.
"""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .core import ShapeError
from .ndgrad import Tensor

PROB_EPS = 1e-7


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _bce_logits_fwd(vals):
    s, y = vals
    if s.shape != y.shape:
        raise ShapeError(f"classification_loss: scores {s.shape} vs labels {y.shape}")
    # log sigma(s) = -softplus(-s), log(1 - sigma(s)) = -softplus(s)
    per = y * _softplus(-s) + (1 - y) * _softplus(s)
    return np.asarray(per.mean(), dtype=s.dtype), None


def _bce_logits_bwd(g, _cache, vals):
    s, y = vals
    sig = 0.5 * (1 + np.tanh(0.5 * s))
    return (g * (sig - y) / s.size).astype(s.dtype), None


def _bce_fwd(vals):
    p, y = vals
    if p.shape != y.shape:
        raise ShapeError(f"bce: prediction {p.shape} vs target {y.shape}")
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    per = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return np.asarray(per.mean(), dtype=p.dtype), pc


def _bce_bwd(g, pc, vals):
    p, y = vals
    inside = (p >= PROB_EPS) & (p <= 1 - PROB_EPS)
    dp = (pc - y) / (pc * (1 - pc)) / p.size
    return (g * dp * inside).astype(p.dtype), None


nd.register_op("bce_logits", _bce_logits_fwd, _bce_logits_bwd)
nd.register_op("bce", _bce_fwd, _bce_bwd)


def _constant(y, like: Tensor) -> Tensor:
    value = y.value if isinstance(y, Tensor) else np.asarray(y)
    return Tensor(value.astype(like.value.dtype, copy=False))


def classification_loss(scores, labels) -> Tensor:
    """Multi-label logistic loss averaged over classes (and over the batch)."""
    scores = nd.as_tensor(scores)
    labels = np.asarray(labels)
    if labels.size != scores.value.size:
        raise ShapeError(f"classification_loss: {scores.shape} scores vs {labels.shape} labels")
    return nd.forward_op("bce_logits", (scores, _constant(labels.reshape(scores.shape), scores)))


def filter_loss(pred, label) -> Tensor:
    """Pixel-mean BCE of a directive-filter map against its binary pseudo label."""
    pred = nd.as_tensor(pred)
    return nd.forward_op("bce", (pred, _constant(label, pred)))


def multi_guidance_loss(pred, soft_target) -> Tensor:
    """Pixel-mean BCE of the decoder map against the soft, gradient-free guidance map."""
    pred = nd.as_tensor(pred)
    return nd.forward_op("bce", (pred, _constant(soft_target, pred)))


def self_supervision_loss(p1, p2, mode: str = "similarity") -> Tensor:
    """``mean((p1 - p2)^2)``; ``mode="literal"`` negates it (pushes filters apart for delta > 0)."""
    diff_sq = nd.mean(nd.square(nd.sub(p1, p2)))
    if mode == "similarity":
        return diff_sq
    if mode == "literal":
        return nd.mul_scalar(diff_sq, -1.0)
    raise ValueError(f"unknown self-supervision mode {mode!r}")


def total_loss(l1: Tensor, l2: Tensor, lmg: Tensor, lss: Tensor, delta: float) -> Tensor:
    return nd.add(nd.add(nd.add(l1, l2), lmg), nd.mul_scalar(lss, delta))
